use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_step, collect_grads, TrainError};
use crate::data::{question_prompt, TrainExample};
use crate::lm::{answer_labels, encode_pair, masked_loss_graph, BaseWeights, Head, LoraAdapter, LoraConfig};
use crate::tensor::{Adam, AdamConfig, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Only answer tokens contribute; question logits are ignored.
    #[default]
    AnswerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mask: LossMask,
    pub lora: LoraConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-4,
            epochs: 1,
            seed: 0,
            loss_mask: LossMask::AnswerOnly,
            lora: LoraConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Contract("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Contract("lr must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean per-token loss over the batch.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub adapter: LoraAdapter,
    pub log: Vec<StepLog>,
}

/// Trains a fresh adapter to maximize `sum log p(answer | question)` over
/// `examples`. Both polarities go through this same routine.
pub fn finetune_head(
    base: &BaseWeights,
    examples: &[TrainExample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if base.params().iter().any(|(_, t)| t.requires_grad()) {
        return Err(TrainError::Contract("base weights must be frozen".into()));
    }
    if let Some(first) = examples.first() {
        if let Some(bad) = examples.iter().find(|e| e.polarity != first.polarity) {
            return Err(TrainError::Contract(format!(
                "a head trains on one polarity; found {:?} and {:?} (answer `{}`)",
                first.polarity, bad.polarity, bad.answer
            )));
        }
    }
    if let Some(bad) = examples.iter().find(|e| e.answer.is_empty() || !e.is_consistent()) {
        return Err(TrainError::Contract(format!(
            "malformed example for question `{}`",
            bad.question
        )));
    }
    let mut adapter = LoraAdapter::<f32>::new(&base.config, &cfg.lora, cfg.seed)?;
    let encoded: Vec<_> = examples
        .iter()
        .map(|e| {
            let (ctx, tgt) = encode_pair(&question_prompt(&e.question), &e.answer);
            answer_labels(&ctx, &tgt)
        })
        .collect();
    let mut adam = Adam::<f32>::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut loss_sum = 0.0;
            let mut tokens = 0usize;
            for &i in batch {
                let (inputs, labels, mask) = &encoded[i];
                let mut g = Graph::new();
                let head = Head::with_adapter(base, &adapter)?;
                let (loss, b) = masked_loss_graph(&mut g, &head, inputs, labels, mask)?;
                loss_sum += f64::from(g.value(loss)[0]);
                tokens += mask.iter().filter(|&&m| m).count();
                g.backward(loss)?;
                collect_grads(&g, &b.adapter, adapter.params_mut().into_iter().map(|(_, t)| t))?;
            }
            apply_step(&mut adam, adapter.params_mut(), 1.0 / tokens as f32)?;
            log.push(StepLog {
                step: log.len(),
                loss: loss_sum / tokens as f64,
            });
        }
    }
    adapter.set_trainable(false);
    Ok(FinetuneOutcome { adapter, log })
}

/// Appends `{step, loss}` lines.
pub fn write_log_jsonl(path: &Path, log: &[StepLog]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(true).open(path)?,
    );
    for entry in log {
        writeln!(f, "{}", serde_json::to_string(entry).map_err(std::io::Error::other)?)?;
    }
    f.flush()
}
