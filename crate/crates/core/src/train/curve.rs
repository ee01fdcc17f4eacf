use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{finetune_head, FinetuneConfig, TrainError};
use crate::data::{Polarity, TrainExample};
use crate::lm::{BaseWeights, LoraAdapter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub acc: f64,
    pub acc_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_examples: usize,
    pub acc: f64,
    pub acc_norm: f64,
    pub head_checksums: Vec<String>,
}

/// The first `n` examples of the pool shuffled by `seed`. For a fixed seed
/// the `n`-set is a prefix of the `m`-set whenever `n < m`.
pub fn nested_prefix(pool: &[TrainExample], n: usize, seed: u64) -> Result<Vec<TrainExample>, TrainError> {
    if n > pool.len() {
        return Err(TrainError::Contract(format!(
            "size {n} exceeds pool of {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order[..n].iter().map(|&i| pool[i].clone()).collect())
}

/// Trains a fresh head per size on nested subsets and evaluates each.
pub fn learning_curve<F>(
    base: &BaseWeights,
    pool: &[TrainExample],
    sizes: &[usize],
    polarity: Polarity,
    cfg: &FinetuneConfig,
    mut eval_fn: F,
) -> Result<Vec<CurvePoint>, TrainError>
where
    F: FnMut(usize, &LoraAdapter) -> Result<CurveMetrics, TrainError>,
{
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TrainError::Contract("sizes must be strictly ascending".into()));
    }
    if let Some(&max) = sizes.last() {
        if max > pool.len() {
            return Err(TrainError::Contract(format!(
                "size {max} exceeds pool of {}",
                pool.len()
            )));
        }
    }
    if pool.iter().any(|e| e.polarity != polarity) {
        return Err(TrainError::Contract(format!("pool is not all {polarity:?}")));
    }
    sizes
        .iter()
        .map(|&n| {
            let subset = nested_prefix(pool, n, cfg.seed)?;
            let head = finetune_head(base, &subset, cfg)?.adapter;
            let m = eval_fn(n, &head)?;
            Ok(CurvePoint {
                n_examples: n,
                acc: m.acc,
                acc_norm: m.acc_norm,
                head_checksums: vec![head.checksum()],
            })
        })
        .collect()
}
