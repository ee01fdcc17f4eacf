use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_pool, EvalError};
use crate::data::{choice_topics, irrelevant_answer, McqItem};
use crate::lm::{sequence_loglik, BaseWeights, Head, LoraAdapter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Correct,
    Incorrect,
    Irrelevant,
    Unrelated,
}

impl AnswerType {
    pub const ALL: [AnswerType; 4] = [
        AnswerType::Correct,
        AnswerType::Incorrect,
        AnswerType::Irrelevant,
        AnswerType::Unrelated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnswerType::Correct => "correct",
            AnswerType::Incorrect => "incorrect",
            AnswerType::Irrelevant => "irrelevant",
            AnswerType::Unrelated => "unrelated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub item_id: String,
    pub context: String,
    pub correct: String,
    /// Wrong choice with the highest per-character likelihood under base.
    pub incorrect: String,
    pub irrelevant: String,
    pub unrelated: String,
    /// Per-character base log-likelihoods, in [`AnswerType::ALL`] order.
    pub base_per_char: [f64; 4],
}

impl ProbeItem {
    pub fn text(&self, t: AnswerType) -> &str {
        match t {
            AnswerType::Correct => &self.correct,
            AnswerType::Incorrect => &self.incorrect,
            AnswerType::Irrelevant => &self.irrelevant,
            AnswerType::Unrelated => &self.unrelated,
        }
    }
}

/// Four answers per test item, chosen once under the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTypeProbe {
    pub base_checksum: String,
    pub items: Vec<ProbeItem>,
}

impl AnswerTypeProbe {
    /// `contexts[i]` is the scoring context of `test[i]`. Irrelevant answers
    /// are wrong choices of other items; unrelated ones come from `unrelated_pool`.
    pub fn build(
        base: &BaseWeights,
        test: &[McqItem],
        contexts: &[String],
        unrelated_pool: &[String],
        seed: u64,
    ) -> Result<Self, EvalError> {
        if test.len() < 2 || unrelated_pool.is_empty() || contexts.len() != test.len() {
            return Err(EvalError::Contract(
                "probe needs two or more items, one context each and a non-empty unrelated pool".into(),
            ));
        }
        let head = Head::base_only(base);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topics = choice_topics(test);
        let mut items = Vec::with_capacity(test.len());
        for (i, (it, ctx)) in test.iter().zip(contexts).enumerate() {
            let mut incorrect: Option<(f64, &str)> = None;
            for w in it.wrong_texts() {
                let s = sequence_loglik(&head, ctx, w)?.per_char;
                if incorrect.is_none_or(|(b, _)| s > b) {
                    incorrect = Some((s, w));
                }
            }
            let incorrect = incorrect
                .ok_or_else(|| EvalError::Contract(format!("item `{}` has no wrong choice", it.id)))?
                .1;
            let irrelevant = irrelevant_answer(test, &topics, i, &mut rng).map(str::to_string);
            let irrelevant = irrelevant
                .ok_or_else(|| EvalError::Contract(format!("no irrelevant answer for `{}`", it.id)))?;
            let unrelated = unrelated_pool.choose(&mut rng).expect("non-empty").clone();
            let mut p = ProbeItem {
                item_id: it.id.clone(),
                context: ctx.clone(),
                correct: it.correct_text().to_string(),
                incorrect: incorrect.to_string(),
                irrelevant,
                unrelated,
                base_per_char: [0.0; 4],
            };
            for (k, t) in AnswerType::ALL.iter().enumerate() {
                p.base_per_char[k] = sequence_loglik(&head, &p.context, p.text(*t))?.per_char;
            }
            items.push(p);
        }
        Ok(Self {
            base_checksum: base.checksum(),
            items,
        })
    }

    /// Mean per-character log-likelihood change of each answer type under
    /// `head`, relative to the base scores stored in the probe.
    pub fn mean_deltas(&self, head: &Head<'_>, jobs: usize) -> Result<[f64; 4], EvalError> {
        if head.base.checksum() != self.base_checksum {
            return Err(EvalError::Contract("head was not built on the probe's base".into()));
        }
        let per_item = run_pool(jobs, || {
            self.items
                .par_iter()
                .map(|p| {
                    let mut d = [0.0; 4];
                    for (k, t) in AnswerType::ALL.iter().enumerate() {
                        d[k] = sequence_loglik(head, &p.context, p.text(*t))?.per_char - p.base_per_char[k];
                    }
                    Ok(d)
                })
                .collect::<Result<Vec<_>, EvalError>>()
        })?;
        let mut mean = [0.0; 4];
        for d in &per_item {
            for k in 0..4 {
                mean[k] += d[k];
            }
        }
        Ok(mean.map(|m| m / per_item.len() as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassRow {
    pub head: String,
    pub n_examples: usize,
    pub answer_type: AnswerType,
    pub mean_delta_per_char: f64,
}

/// One row per (checkpoint, answer type). Checkpoints are
/// `(head name, n_examples, adapter)`; an adapter of `None` is the base.
pub fn probability_mass_analysis(
    base: &BaseWeights,
    checkpoints: &[(String, usize, Option<LoraAdapter>)],
    probe: &AnswerTypeProbe,
    jobs: usize,
) -> Result<Vec<MassRow>, EvalError> {
    let mut rows = Vec::with_capacity(checkpoints.len() * 4);
    for (name, n, adapter) in checkpoints {
        let head = match adapter {
            Some(a) => Head::with_adapter(base, a)
                .map_err(|e| EvalError::Contract(format!("checkpoint {name}@{n}: {e}")))?,
            None => Head::base_only(base),
        };
        let deltas = probe.mean_deltas(&head, jobs)?;
        for (t, d) in AnswerType::ALL.iter().zip(deltas) {
            rows.push(MassRow {
                head: name.clone(),
                n_examples: *n,
                answer_type: *t,
                mean_delta_per_char: d,
            });
        }
    }
    Ok(rows)
}
