//! Likelihood-ratio scoring and multiple-choice evaluation.
//!
//! Evaluation is split in two: [`compute_table`] runs the models once per
//! (item, choice) and [`decide`] turns a table into decisions for a given
//! negative-head weight. Sweeps and external tables reuse the second half.

mod probe;
mod table;

pub use probe::{probability_mass_analysis, AnswerType, AnswerTypeProbe, MassRow, ProbeItem};
pub use table::{read_table_jsonl, write_table_jsonl, ChoiceLik, ItemLik, LikelihoodTable, TableRow};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{few_shot_context, join_context, DataError, McqItem};
use crate::lm::{sequence_loglik, Head, LmError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("likelihood table is missing entries for items: {}", .0.join(", "))]
    MissingEntries(Vec<String>),
    #[error("likelihood table line {line}: {msg}")]
    Table { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A positive and a negative head over one shared base, combined as
/// `L+ - weight * L-` on per-character log-likelihoods.
#[derive(Debug, Clone, Copy)]
pub struct LikraScorer<'a> {
    pub positive: Head<'a>,
    pub negative: Head<'a>,
    pub weight: f64,
}

impl<'a> LikraScorer<'a> {
    pub fn new(positive: Head<'a>, negative: Head<'a>, weight: f64) -> Result<Self, EvalError> {
        if !positive.shares_base(&negative) {
            return Err(EvalError::Contract("positive and negative heads must share one base".into()));
        }
        check_weight(weight)?;
        Ok(Self {
            positive,
            negative,
            weight,
        })
    }
}

fn check_weight(w: f64) -> Result<(), EvalError> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(EvalError::Contract(format!("weight {w} must be finite and non-negative")))
    }
}

/// `per_char L+(answer | context) - w * per_char L-(answer | context)`.
pub fn likra_score(scorer: &LikraScorer<'_>, context: &str, answer: &str) -> Result<f64, EvalError> {
    let plus = sequence_loglik(&scorer.positive, context, answer)?;
    if scorer.weight == 0.0 {
        return Ok(plus.per_char);
    }
    let minus = sequence_loglik(&scorer.negative, context, answer)?;
    Ok(plus.per_char - scorer.weight * minus.per_char)
}

/// How an evaluation builds its per-item contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Few-shot demonstrations per item, drawn from the shot pool.
    pub k_shot: usize,
    pub seed: u64,
    /// Worker threads; 0 or 1 runs serially.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k_shot: 0,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Scoring context for every item: few-shot block plus question prompt.
pub fn item_contexts(items: &[McqItem], shot_pool: &[McqItem], opts: &EvalOptions) -> Result<Vec<String>, EvalError> {
    if opts.k_shot > 0 {
        let test_ids: std::collections::HashSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
        if let Some(clash) = shot_pool.iter().find(|p| test_ids.contains(p.id.as_str())) {
            return Err(EvalError::Contract(format!(
                "few-shot pool contains test item `{}`",
                clash.id
            )));
        }
    }
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let shot_seed = opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            let shots = few_shot_context(shot_pool, opts.k_shot, shot_seed)?;
            Ok(join_context(&shots, &it.question))
        })
        .collect()
}

fn run_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    if jobs <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Log-likelihoods of every choice under the positive and (optionally)
/// negative head. Without a negative head the minus side is zero.
pub fn compute_table(
    positive: &Head<'_>,
    negative: Option<&Head<'_>>,
    items: &[McqItem],
    contexts: &[String],
    jobs: usize,
) -> Result<LikelihoodTable, EvalError> {
    if items.len() != contexts.len() {
        return Err(EvalError::Contract("one context per item required".into()));
    }
    if let Some(n) = negative {
        if !positive.shares_base(n) {
            return Err(EvalError::Contract("positive and negative heads must share one base".into()));
        }
    }
    let rows = run_pool(jobs, || {
        items
            .par_iter()
            .zip(contexts)
            .map(|(it, ctx)| {
                let choices = it
                    .choices
                    .iter()
                    .map(|c| {
                        let plus = sequence_loglik(positive, ctx, &c.text)?;
                        let minus = match negative {
                            Some(n) => sequence_loglik(n, ctx, &c.text)?,
                            None => crate::lm::SequenceLoglik {
                                total: 0.0,
                                per_char: 0.0,
                                per_byte: 0.0,
                            },
                        };
                        Ok(ChoiceLik {
                            label: c.label.clone(),
                            plus,
                            minus,
                        })
                    })
                    .collect::<Result<Vec<_>, EvalError>>()?;
                Ok(ItemLik {
                    item_id: it.id.clone(),
                    choices,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()
    })?;
    Ok(LikelihoodTable { items: rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub label: String,
    /// Per-character log-likelihood under the positive head.
    pub l_plus: f64,
    /// Per-character log-likelihood under the negative head.
    pub l_minus: f64,
    /// Per-character score `l_plus - w * l_minus`.
    pub score: f64,
    /// Same combination on total log-likelihoods.
    pub score_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub answer_key: String,
    pub choices: Vec<ChoiceRecord>,
    /// Choice picked by the per-character score.
    pub chosen_norm: String,
    /// Choice picked by the total score.
    pub chosen: String,
    pub correct_norm: bool,
    pub correct: bool,
    /// The per-character argmax was shared by several choices and the
    /// lowest index won.
    pub tie_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weight: f64,
    pub n_items: usize,
    pub acc: f64,
    pub acc_norm: f64,
    /// Accuracy under per-byte normalization, reported alongside.
    pub acc_per_byte: f64,
    pub ties_norm: usize,
    pub items: Vec<ItemRecord>,
}

/// Index of the maximum, lowest index on ties, and whether a tie occurred.
fn argmax(xs: impl Iterator<Item = f64>) -> (usize, bool) {
    let mut best = (0, f64::NEG_INFINITY, false);
    for (i, x) in xs.enumerate() {
        if i == 0 || x > best.1 {
            best = (i, x, false);
        } else if x == best.1 {
            best.2 = true;
        }
    }
    (best.0, best.2)
}

/// Applies the decision rule to a likelihood table.
pub fn decide(items: &[McqItem], table: &LikelihoodTable, weight: f64) -> Result<EvalReport, EvalError> {
    check_weight(weight)?;
    if items.is_empty() {
        return Err(EvalError::Contract("no items to evaluate".into()));
    }
    let aligned = table.align(items)?;
    let mut records = Vec::with_capacity(items.len());
    let (mut hits, mut hits_norm, mut hits_byte, mut ties) = (0usize, 0usize, 0usize, 0usize);
    for (it, lik) in items.iter().zip(aligned) {
        let combine = |p: f64, m: f64| if weight == 0.0 { p } else { p - weight * m };
        let choices: Vec<ChoiceRecord> = lik
            .iter()
            .map(|c| ChoiceRecord {
                label: c.label.clone(),
                l_plus: c.plus.per_char,
                l_minus: c.minus.per_char,
                score: combine(c.plus.per_char, c.minus.per_char),
                score_total: combine(c.plus.total, c.minus.total),
            })
            .collect();
        let (i_norm, tie) = argmax(choices.iter().map(|c| c.score));
        let (i_total, _) = argmax(choices.iter().map(|c| c.score_total));
        let (i_byte, _) = argmax(lik.iter().map(|c| combine(c.plus.per_byte, c.minus.per_byte)));
        let key = it.answer_index();
        hits += usize::from(i_total == key);
        hits_norm += usize::from(i_norm == key);
        hits_byte += usize::from(i_byte == key);
        ties += usize::from(tie);
        records.push(ItemRecord {
            item_id: it.id.clone(),
            answer_key: it.answer_key.clone(),
            chosen_norm: choices[i_norm].label.clone(),
            chosen: choices[i_total].label.clone(),
            correct_norm: i_norm == key,
            correct: i_total == key,
            tie_norm: tie,
            choices,
        });
    }
    let n = items.len() as f64;
    Ok(EvalReport {
        weight,
        n_items: items.len(),
        acc: hits as f64 / n,
        acc_norm: hits_norm as f64 / n,
        acc_per_byte: hits_byte as f64 / n,
        ties_norm: ties,
        items: records,
    })
}

/// Full evaluation of a scorer: contexts, likelihoods, decisions.
pub fn evaluate_mcq(
    scorer: &LikraScorer<'_>,
    test: &[McqItem],
    shot_pool: &[McqItem],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let contexts = item_contexts(test, shot_pool, opts)?;
    let neg = (scorer.weight != 0.0).then_some(&scorer.negative);
    let table = compute_table(&scorer.positive, neg, test, &contexts, opts.jobs)?;
    decide(test, &table, scorer.weight)
}

/// Evaluation of a single head (plain likelihood scoring).
pub fn evaluate_head(
    head: &Head<'_>,
    test: &[McqItem],
    shot_pool: &[McqItem],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let contexts = item_contexts(test, shot_pool, opts)?;
    let table = compute_table(head, None, test, &contexts, opts.jobs)?;
    decide(test, &table, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub weight: f64,
    pub acc: f64,
    pub acc_norm: f64,
}

/// One decision pass per weight over cached likelihoods.
pub fn weight_sweep(items: &[McqItem], table: &LikelihoodTable, weights: &[f64]) -> Result<Vec<SweepPoint>, EvalError> {
    weights
        .iter()
        .map(|&w| {
            let r = decide(items, table, w)?;
            Ok(SweepPoint {
                weight: w,
                acc: r.acc,
                acc_norm: r.acc_norm,
            })
        })
        .collect()
}

/// [`decide`] on an externally supplied table, after checking coverage.
pub fn score_from_table(items: &[McqItem], table: &LikelihoodTable, weight: f64) -> Result<EvalReport, EvalError> {
    decide(items, table, weight)
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "weight,n_items,acc,acc_norm,acc_per_byte,ties_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.weight, self.n_items, self.acc, self.acc_norm, self.acc_per_byte, self.ties_norm
        )
    }
}
