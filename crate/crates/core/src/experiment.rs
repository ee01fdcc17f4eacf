//! The toy pipeline behind every figure: load or generate a benchmark,
//! pretrain (or accept) a base, train heads along the size grid and score
//! them. The command-line runner and the acceptance suite both drive it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    gen_synthetic_benchmark, load_mcq_jsonl, make_negatives, positives, DataError, McqItem, NegativeKind,
    SyntheticSpec, TrainExample,
};
use crate::eval::{
    compute_table, decide, item_contexts, probability_mass_analysis, weight_sweep, AnswerTypeProbe, EvalError,
    EvalOptions, LikelihoodTable, MassRow, SweepPoint,
};
use crate::lm::{BaseWeights, Head, LmError, LoraAdapter, LoraConfig, LoraTarget, ModelConfig};
use crate::train::{finetune_head, nested_prefix, pretrain, FinetuneConfig, FinetuneOutcome, PretrainConfig, PretrainOutcome, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad or inconsistent configuration, detected before heavy compute.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing checkpoints for n = {}", .0.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", "))]
    MissingCheckpoints(Vec<usize>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Jsonl(JsonlSource),
}

/// Multiple-choice files plus optional plain-text side inputs, one entry
/// per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlSource {
    pub train: PathBuf,
    pub test: PathBuf,
    /// Pretraining documents. Needed only when no base checkpoint is given.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Sentences for unrelated negatives and the probe.
    #[serde(default)]
    pub unrelated: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: Vec<String>,
    pub train: Vec<McqItem>,
    pub test: Vec<McqItem>,
    pub unrelated_pool: Vec<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

impl DatasetSource {
    /// Synthetic benchmarks are regenerated per run seed, offset by the
    /// spec's own seed.
    pub fn load(&self, seed: u64) -> Result<Dataset, ExperimentError> {
        match self {
            DatasetSource::Synthetic(spec) => {
                let spec = SyntheticSpec {
                    seed: spec.seed.wrapping_add(seed),
                    ..spec.clone()
                };
                let b = gen_synthetic_benchmark(&spec)?;
                Ok(Dataset {
                    corpus: b.corpus,
                    train: b.train,
                    test: b.test,
                    unrelated_pool: b.unrelated_pool,
                })
            }
            DatasetSource::Jsonl(src) => {
                let load = |p: &Path| {
                    load_mcq_jsonl(p).map_err(|e| match e {
                        DataError::Io(source) => ExperimentError::Io {
                            path: p.to_path_buf(),
                            source,
                        },
                        other => other.into(),
                    })
                };
                Ok(Dataset {
                    corpus: src.corpus.as_deref().map(read_lines).transpose()?.unwrap_or_default(),
                    train: load(&src.train)?,
                    test: load(&src.test)?,
                    unrelated_pool: src.unrelated.as_deref().map(read_lines).transpose()?.unwrap_or_default(),
                })
            }
        }
    }

    /// Makes relative paths relative to `dir`.
    pub fn rebase(&mut self, dir: &Path) {
        if let DatasetSource::Jsonl(src) = self {
            for p in [Some(&mut src.train), Some(&mut src.test), src.corpus.as_mut(), src.unrelated.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
    }

    /// Input files whose hashes belong in a run manifest.
    pub fn input_files(&self) -> Vec<PathBuf> {
        match self {
            DatasetSource::Synthetic(_) => Vec::new(),
            DatasetSource::Jsonl(src) => [Some(&src.train), Some(&src.test), src.corpus.as_ref(), src.unrelated.as_ref()]
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
        }
    }
}

/// A learning curve the runner can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurveKind {
    /// Positive head alone.
    Sft,
    /// Positive head against a negative head of the configured strategy.
    SftLikra,
    /// The base model against a negative head of the configured strategy.
    BaseLikra,
    /// Positive head against a negative head of the given strategy.
    Strategy(NegativeKind),
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurveKind::Sft => f.write_str("sft"),
            CurveKind::SftLikra => f.write_str("sft-likra"),
            CurveKind::BaseLikra => f.write_str("base-likra"),
            CurveKind::Strategy(k) => write!(f, "sft-likra-{}", k.name()),
        }
    }
}

impl FromStr for CurveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let kinds = [NegativeKind::Incorrect, NegativeKind::Irrelevant, NegativeKind::Unrelated];
        match s {
            "sft" => Ok(CurveKind::Sft),
            "sft-likra" => Ok(CurveKind::SftLikra),
            "base-likra" => Ok(CurveKind::BaseLikra),
            _ => kinds
                .into_iter()
                .find(|k| s.strip_prefix("sft-likra-") == Some(k.name()))
                .map(CurveKind::Strategy)
                .ok_or_else(|| {
                    format!("unknown curve `{s}` (expected sft, sft-likra, base-likra or sft-likra-<strategy>)")
                }),
        }
    }
}

impl Serialize for CurveKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CurveKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which head an adapter checkpoint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadId {
    Positive,
    Negative(NegativeKind),
}

impl HeadId {
    pub fn stem(self) -> String {
        match self {
            HeadId::Positive => "pos".into(),
            HeadId::Negative(k) => format!("neg-{}", k.name()),
        }
    }

    pub fn checkpoint_name(self, n: usize) -> String {
        format!("{}-n{n:04}.lka", self.stem())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    /// `seed` inside is replaced by the run seed.
    pub pretrain: PretrainConfig,
    /// `seed` inside is replaced by the run seed.
    pub finetune: FinetuneConfig,
    pub negative_strategy: NegativeKind,
    /// Train the positive head on the whole pool at every curve point
    /// instead of on the first n examples.
    pub positive_full_pool: bool,
    pub curves: Vec<CurveKind>,
    /// Training-set sizes. Sizes above the pool are dropped.
    pub sizes: Vec<usize>,
    pub include_full_pool: bool,
    /// Negative-head weight for curves.
    pub weight: f64,
    /// Grid for the weight sweep.
    pub weights: Vec<f64>,
    /// Curve point used by the sweep; the largest one when unset.
    pub sweep_n: Option<usize>,
    /// Few-shot demonstrations; 25 for JSONL data and 0 for the synthetic
    /// benchmark when unset.
    pub k_shot: Option<usize>,
    /// Give the probe the same few-shot contexts as evaluation.
    pub probe_few_shot: bool,
    pub seeds: Vec<u64>,
    /// Base checkpoint to use instead of pretraining.
    pub base_checkpoint: Option<PathBuf>,
}

pub const PAPER_WEIGHT_GRID: [f64; 12] = [0.0, 0.125, 0.25, 0.5, 0.75, 0.9, 1.0, 1.1, 1.25, 1.5, 1.75, 2.0];

/// Powers of two from 16 to 4096.
pub fn paper_size_grid() -> Vec<usize> {
    (4..=12).map(|p| 1usize << p).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d_model = 48;
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            model: ModelConfig {
                n_layers: 2,
                d_model,
                n_heads: 4,
                d_ff: 4 * d_model,
                max_seq_len: 96,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig {
                steps: 3000,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                lr: 3e-3,
                epochs: 4,
                lora: LoraConfig {
                    targets: vec![LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output],
                    ..LoraConfig::default()
                },
                ..FinetuneConfig::default()
            },
            negative_strategy: NegativeKind::Incorrect,
            positive_full_pool: false,
            curves: vec![CurveKind::Sft, CurveKind::SftLikra, CurveKind::BaseLikra],
            sizes: std::iter::once(0).chain(paper_size_grid()).collect(),
            include_full_pool: true,
            weight: 1.0,
            weights: PAPER_WEIGHT_GRID.to_vec(),
            sweep_n: None,
            k_shot: None,
            probe_few_shot: false,
            seeds: vec![0, 1, 2],
            base_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate().map_err(|e| config_err(format!("model: {e}")))?;
        if !self.model.supports_bytes() {
            return Err(config_err("model: vocab_size is too small for the byte tokenizer"));
        }
        self.finetune.validate().map_err(|e| config_err(format!("finetune: {e}")))?;
        self.finetune.lora.validate().map_err(|e| config_err(format!("finetune.lora: {e}")))?;
        if self.pretrain.batch_size == 0 {
            return Err(config_err("pretrain: batch_size must be positive"));
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return Err(config_err("pretrain: lr must be positive and finite"));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate().map_err(|e| config_err(e.to_string()))?;
        }
        if self.curves.is_empty() {
            return Err(config_err("curves must not be empty"));
        }
        if self.sizes.is_empty() && !self.include_full_pool {
            return Err(config_err("the size grid is empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        let bad_weight = |w: f64| !(w.is_finite() && w >= 0.0);
        if bad_weight(self.weight) {
            return Err(config_err(format!("weight {} must be finite and non-negative", self.weight)));
        }
        if self.weights.is_empty() {
            return Err(config_err("weights must not be empty"));
        }
        if let Some(w) = self.weights.iter().find(|w| bad_weight(**w)) {
            return Err(config_err(format!("sweep weight {w} must be finite and non-negative")));
        }
        Ok(())
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot.unwrap_or(match self.dataset {
            DatasetSource::Synthetic(_) => 0,
            DatasetSource::Jsonl(_) => 25,
        })
    }

    /// Sorted, deduplicated sizes that fit a pool of `pool` examples, plus
    /// the full pool when requested.
    pub fn size_grid(&self, pool: usize) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.sizes.iter().copied().filter(|&n| n <= pool).collect();
        if self.include_full_pool {
            sizes.push(pool);
        }
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    /// Negative strategies the configured curves need, in first-use order.
    pub fn strategies(&self) -> Vec<NegativeKind> {
        let mut out = Vec::new();
        for c in &self.curves {
            let k = match c {
                CurveKind::Sft => continue,
                CurveKind::SftLikra | CurveKind::BaseLikra => self.negative_strategy,
                CurveKind::Strategy(k) => *k,
            };
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }
}

/// Sweep grid with repeated weights removed (first occurrence kept), and
/// the weights that were dropped.
pub fn dedup_weights(weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut kept: Vec<f64> = Vec::new();
    let mut dropped = Vec::new();
    for &w in weights {
        if kept.contains(&w) {
            dropped.push(w);
        } else {
            kept.push(w);
        }
    }
    (kept, dropped)
}

/// One seed's data, base model and scoring contexts.
pub struct Lab {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub data: Dataset,
    pub base: BaseWeights,
    pub contexts: Vec<String>,
    pub probe_contexts: Vec<String>,
    pub jobs: usize,
}

/// Pretrains a base on the dataset's corpus under the run seed.
pub fn pretrain_base(config: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<PretrainOutcome, ExperimentError> {
    if data.corpus.is_empty() {
        return Err(config_err("pretraining needs a corpus; set dataset.jsonl.corpus or base_checkpoint"));
    }
    let cfg = PretrainConfig {
        seed,
        ..config.pretrain.clone()
    };
    Ok(pretrain(&data.corpus, &config.model, &cfg)?)
}

impl Lab {
    pub fn new(
        config: &ExperimentConfig,
        seed: u64,
        data: Dataset,
        base: BaseWeights,
        jobs: usize,
    ) -> Result<Self, ExperimentError> {
        if base.config != config.model {
            return Err(config_err("base checkpoint was built with a different model config"));
        }
        let opts = EvalOptions {
            k_shot: config.k_shot(),
            seed,
            jobs,
        };
        let contexts = item_contexts(&data.test, &data.train, &opts)?;
        let probe_contexts = if config.probe_few_shot {
            contexts.clone()
        } else {
            item_contexts(&data.test, &data.train, &EvalOptions { k_shot: 0, ..opts })?
        };
        Ok(Self {
            config: config.clone(),
            seed,
            data,
            base,
            contexts,
            probe_contexts,
            jobs,
        })
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed,
            ..self.config.finetune.clone()
        }
    }

    pub fn size_grid(&self) -> Vec<usize> {
        self.config.size_grid(self.data.train.len())
    }

    pub fn pool(&self, head: HeadId) -> Result<Vec<TrainExample>, ExperimentError> {
        Ok(match head {
            HeadId::Positive => positives(&self.data.train),
            HeadId::Negative(k) => make_negatives(&self.data.train, k, Some(&self.data.unrelated_pool), self.seed)?,
        })
    }

    /// Fresh head trained on the first `n` examples of the shuffled pool.
    pub fn train_head(&self, head: HeadId, n: usize) -> Result<LoraAdapter, ExperimentError> {
        Ok(self.train_head_logged(head, n)?.adapter)
    }

    pub fn train_head_logged(&self, head: HeadId, n: usize) -> Result<FinetuneOutcome, ExperimentError> {
        let pool = self.pool(head)?;
        let n = if head == HeadId::Positive && self.config.positive_full_pool {
            pool.len()
        } else {
            n
        };
        let subset = nested_prefix(&pool, n, self.seed)?;
        Ok(finetune_head(&self.base, &subset, &self.finetune_config())?)
    }

    /// Likelihoods of every test choice under one head, on the plus side.
    pub fn table(&self, adapter: Option<&LoraAdapter>) -> Result<LikelihoodTable, ExperimentError> {
        let head = match adapter {
            Some(a) => Head::with_adapter(&self.base, a)?,
            None => Head::base_only(&self.base),
        };
        Ok(compute_table(&head, None, &self.data.test, &self.contexts, self.jobs)?)
    }

    pub fn probe(&self) -> Result<AnswerTypeProbe, ExperimentError> {
        Ok(AnswerTypeProbe::build(
            &self.base,
            &self.data.test,
            &self.probe_contexts,
            &self.data.unrelated_pool,
            self.seed,
        )?)
    }

    /// Probe rows for the base (head `base`, n 0) followed by `checkpoints`.
    pub fn probe_rows(&self, checkpoints: &[(String, usize, Option<LoraAdapter>)]) -> Result<Vec<MassRow>, ExperimentError> {
        let probe = self.probe()?;
        let mut all = vec![("base".to_string(), 0, None)];
        all.extend(checkpoints.iter().cloned());
        Ok(probability_mass_analysis(&self.base, &all, &probe, self.jobs)?)
    }

    pub fn sweep(&self, positive: &LoraAdapter, negative: &LoraAdapter, weights: &[f64]) -> Result<Vec<SweepPoint>, ExperimentError> {
        let table = LikelihoodTable::combine(&self.table(Some(positive))?, &self.table(Some(negative))?)?;
        Ok(weight_sweep(&self.data.test, &table, weights)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub curve_name: String,
    pub n_examples: usize,
    pub acc: f64,
    pub acc_norm: f64,
}

impl CurveRow {
    pub const CSV_HEADER: &'static str = "curve_name,n_examples,acc,acc_norm";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.curve_name, self.n_examples, self.acc, self.acc_norm)
    }
}

/// The combined table of one positive/negative pair along a curve.
#[derive(Debug, Clone)]
pub struct PairTable {
    pub strategy: NegativeKind,
    pub n_examples: usize,
    pub table: LikelihoodTable,
}

#[derive(Debug, Clone)]
pub struct CurveRun {
    pub rows: Vec<CurveRow>,
    pub tables: Vec<PairTable>,
}

fn plus_only(t: &LikelihoodTable) -> LikelihoodTable {
    let mut t = t.clone();
    for c in t.items.iter_mut().flat_map(|i| i.choices.iter_mut()) {
        c.minus = crate::lm::SequenceLoglik {
            total: 0.0,
            per_char: 0.0,
            per_byte: 0.0,
        };
    }
    t
}

/// Trains and scores every configured curve. `on_adapter` sees each trained
/// head, for checkpointing.
///
/// At n = 0 the negative head is untrained and Likra curves fall back to
/// the positive score alone, so every curve starts at its positive model's
/// accuracy. (An untrained negative head is the base itself, and the ratio
/// of a model to itself carries no preference.)
pub fn run_curves(
    lab: &Lab,
    mut on_adapter: impl FnMut(HeadId, usize, &LoraAdapter) -> Result<(), ExperimentError>,
) -> Result<CurveRun, ExperimentError> {
    let cfg = &lab.config;
    let items = &lab.data.test;
    let base_table = plus_only(&lab.table(None)?);
    let strategies = cfg.strategies();
    let sizes = lab.size_grid();
    let full_positive = if cfg.positive_full_pool {
        Some(lab.train_head(HeadId::Positive, 0)?)
    } else {
        None
    };
    let mut per_curve: Vec<Vec<CurveRow>> = vec![Vec::new(); cfg.curves.len()];
    let mut tables = Vec::new();
    for &n in &sizes {
        let pos = match &full_positive {
            Some(a) => a.clone(),
            None => lab.train_head(HeadId::Positive, n)?,
        };
        on_adapter(HeadId::Positive, n, &pos)?;
        let pos_table = plus_only(&lab.table(Some(&pos))?);
        let mut neg_tables = Vec::new();
        for &k in &strategies {
            let neg = lab.train_head(HeadId::Negative(k), n)?;
            on_adapter(HeadId::Negative(k), n, &neg)?;
            let neg_table = lab.table(Some(&neg))?;
            let pair = if n == 0 {
                pos_table.clone()
            } else {
                LikelihoodTable::combine(&pos_table, &neg_table)?
            };
            tables.push(PairTable {
                strategy: k,
                n_examples: n,
                table: pair.clone(),
            });
            neg_tables.push((k, neg_table, pair));
        }
        let pair_of = |k: NegativeKind| neg_tables.iter().find(|t| t.0 == k).expect("strategy trained");
        for (c, rows) in cfg.curves.iter().zip(per_curve.iter_mut()) {
            let report = match c {
                CurveKind::Sft => decide(items, &pos_table, 0.0)?,
                CurveKind::SftLikra => decide(items, &pair_of(cfg.negative_strategy).2, cfg.weight)?,
                CurveKind::Strategy(k) => decide(items, &pair_of(*k).2, cfg.weight)?,
                CurveKind::BaseLikra => {
                    let table = if n == 0 {
                        base_table.clone()
                    } else {
                        LikelihoodTable::combine(&base_table, &pair_of(cfg.negative_strategy).1)?
                    };
                    decide(items, &table, cfg.weight)?
                }
            };
            rows.push(CurveRow {
                curve_name: c.to_string(),
                n_examples: n,
                acc: report.acc,
                acc_norm: report.acc_norm,
            });
        }
    }
    Ok(CurveRun {
        rows: per_curve.into_iter().flatten().collect(),
        tables,
    })
}

/// Pointwise mean over seeds. Every seed must report the same
/// (curve, n) rows in the same order.
pub fn mean_rows(per_seed: &[Vec<CurveRow>]) -> Result<Vec<CurveRow>, ExperimentError> {
    let first = per_seed.first().ok_or_else(|| config_err("no seeds to average"))?;
    let mut out = first.clone();
    for rows in &per_seed[1..] {
        if rows.len() != out.len()
            || rows
                .iter()
                .zip(&out)
                .any(|(a, b)| a.curve_name != b.curve_name || a.n_examples != b.n_examples)
        {
            return Err(config_err("seeds produced different size grids; cannot average"));
        }
        for (o, r) in out.iter_mut().zip(rows) {
            o.acc += r.acc;
            o.acc_norm += r.acc_norm;
        }
    }
    let k = per_seed.len() as f64;
    for o in &mut out {
        o.acc /= k;
        o.acc_norm /= k;
    }
    Ok(out)
}
