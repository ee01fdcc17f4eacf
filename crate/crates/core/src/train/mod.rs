//! Base-model pretraining, answer-only head fine-tuning and learning curves.

mod curve;
mod finetune;
mod pretrain;

pub use curve::{learning_curve, nested_prefix, CurveMetrics, CurvePoint};
pub use finetune::{finetune_head, write_log_jsonl, FinetuneConfig, FinetuneOutcome, LossMask, StepLog};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};

use thiserror::Error;

use crate::data::DataError;
use crate::lm::{BaseWeights, LmError};
use crate::tensor::{Adam, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("contract violation: {0}")]
    Contract(String),
    /// Training produced a non-finite loss or gradient; `last_good` holds the
    /// weights from before the failing step.
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<BaseWeights>,
    },
}

/// Adds the gradients of one recorded sequence into the parameter tensors.
fn collect_grads<'a>(
    g: &Graph<f32>,
    vars: &[Var],
    params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
) -> Result<(), TensorError> {
    for (&v, t) in vars.iter().zip(params) {
        g.accumulate_into(v, t)?;
    }
    Ok(())
}

/// One Adam step over named parameters, after scaling their gradients.
fn apply_step(
    adam: &mut Adam<f32>,
    mut named: Vec<(String, &mut Tensor<f32>)>,
    grad_scale: f32,
) -> Result<(), TensorError> {
    for (_, t) in named.iter_mut() {
        t.scale_grad(grad_scale);
    }
    let mut refs: Vec<(&str, &mut Tensor<f32>)> =
        named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    adam.step(&mut refs)
}
