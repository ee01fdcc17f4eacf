use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_step, collect_grads, StepLog, TrainError};
use crate::lm::tokenizer::{tokenize, BOS, EOS};
use crate::lm::{masked_loss_graph, BaseWeights, Head, ModelConfig};
use crate::tensor::{Adam, AdamConfig, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Documents per step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Frozen weights (no parameter requires grad).
    pub weights: BaseWeights,
    /// Mean per-token loss of the last step, `None` when `steps == 0`.
    pub final_loss: Option<f64>,
    pub log: Vec<StepLog>,
}

/// `[BOS] doc [EOS]`, clipped so the input fits the context window.
fn document_tokens(doc: &str, max_seq_len: usize) -> Vec<u32> {
    let mut t = Vec::with_capacity(doc.len() + 2);
    t.push(BOS);
    t.extend(tokenize(doc));
    t.push(EOS);
    t.truncate(max_seq_len + 1);
    t
}

/// Next-token maximum likelihood over randomly sampled corpus documents.
pub fn pretrain(
    corpus: &[String],
    model_config: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::Contract("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Contract("batch_size must be positive".into()));
    }
    if !model_config.supports_bytes() {
        return Err(TrainError::Contract("pretraining needs a byte-level vocabulary".into()));
    }
    let docs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|d| document_tokens(d, model_config.max_seq_len))
        .collect();
    let mut weights = BaseWeights::<f32>::init(model_config, cfg.seed)?;
    weights.set_trainable(true);
    let mut adam = Adam::<f32>::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let last_good = weights.clone();
        let diverged = |reason: String, mut w: BaseWeights| {
            w.set_trainable(false);
            TrainError::Diverged {
                step,
                reason,
                last_good: Box::new(w),
            }
        };
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for _ in 0..cfg.batch_size {
            let doc = &docs[rng.random_range(0..docs.len())];
            let inputs = &doc[..doc.len() - 1];
            let labels: Vec<usize> = doc[1..].iter().map(|&t| t as usize).collect();
            let mask = vec![true; labels.len()];
            let mut g = Graph::new();
            let (loss, b) = masked_loss_graph(&mut g, &Head::base_only(&weights), inputs, &labels, &mask)?;
            loss_sum += f64::from(g.value(loss)[0]);
            tokens += labels.len();
            g.backward(loss)?;
            collect_grads(&g, &b.base, weights.params_mut().into_iter().map(|(_, t)| t))?;
        }
        let mean = loss_sum / tokens as f64;
        if !mean.is_finite() {
            return Err(diverged(format!("loss {mean}"), last_good));
        }
        if let Err(e) = apply_step(&mut adam, weights.params_mut(), 1.0 / tokens as f32) {
            return Err(diverged(e.to_string(), last_good));
        }
        if !weights.is_finite() {
            return Err(diverged("non-finite parameters".into(), last_good));
        }
        log.push(StepLog { step, loss: mean });
    }
    weights.set_trainable(false);
    Ok(PretrainOutcome {
        weights,
        final_loss: log.last().map(|l| l.loss),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_steps_is_initialization() {
        let out = pretrain(&["abc".into()], &cfg(), &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        let init = BaseWeights::<f32>::init(&cfg(), 0).unwrap();
        assert_eq!(out.weights.checksum(), init.checksum());
        assert!(out.final_loss.is_none());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(pretrain(&[], &cfg(), &PretrainConfig::default()).is_err());
    }

    #[test]
    fn diverging_lr_reports_last_good() {
        let pc = PretrainConfig { steps: 50, lr: 1e30, batch_size: 2, seed: 1 };
        match pretrain(&["hello world".into()], &cfg(), &pc) {
            Err(TrainError::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
            Ok(o) => assert!(o.weights.is_finite()),
            Err(e) => panic!("{e}"),
        }
    }
}
