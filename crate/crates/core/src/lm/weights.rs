use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{LoraConfig, LoraTarget, ModelConfig};
use super::LmError;
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

/// Parameters of one transformer block. Projection matrices are stored
/// `[d_out, d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Scalar = f32> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    const NAMES: [&'static str; 12] = [
        "ln1.gamma", "ln1.beta", "wq", "wk", "wv", "wo", "ln2.gamma", "ln2.beta", "w1", "b1",
        "w2", "b2",
    ];

    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn projection(&self, target: LoraTarget) -> &Tensor<T> {
        match target {
            LoraTarget::Query => &self.wq,
            LoraTarget::Key => &self.wk,
            LoraTarget::Value => &self.wv,
            LoraTarget::Output => &self.wo,
        }
    }
}

/// Frozen (or pretraining) parameters of the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gamma: Tensor<T>,
    pub lnf_beta: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Scalar> BaseWeights<T> {
    /// Seeded random initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gamma: Tensor::full(vec![d], T::ONE),
                ln1_beta: Tensor::zeros(vec![d]),
                wq: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                wk: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                wv: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                wo: Tensor::randn(vec![d, d], resid_std, &mut rng),
                ln2_gamma: Tensor::full(vec![d], T::ONE),
                ln2_beta: Tensor::zeros(vec![d]),
                w1: Tensor::randn(vec![ff, d], INIT_STD, &mut rng),
                b1: Tensor::zeros(vec![ff]),
                w2: Tensor::randn(vec![d, ff], resid_std, &mut rng),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb: Tensor::randn(vec![v, d], INIT_STD, &mut rng),
            pos_emb: Tensor::randn(vec![config.max_seq_len, d], INIT_STD / 2.0, &mut rng),
            layers,
            lnf_gamma: Tensor::full(vec![d], T::ONE),
            lnf_beta: Tensor::zeros(vec![d]),
            w_out: Tensor::randn(vec![v, d], INIT_STD, &mut rng),
        })
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::<T>::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.gamma".to_string(), &self.lnf_gamma));
        out.push(("ln_f.beta".to_string(), &self.lnf_beta));
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LayerWeights::<T>::NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.gamma".to_string(), &mut self.lnf_gamma));
        out.push(("ln_f.beta".to_string(), &mut self.lnf_beta));
        out.push(("w_out".to_string(), &mut self.w_out));
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.is_finite())
    }

    /// SHA-256 over names, shapes and `f32` little-endian values.
    pub fn checksum(&self) -> String {
        checksum_params(&self.params())
    }

    pub fn cast<U: Scalar>(&self) -> BaseWeights<U> {
        BaseWeights {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            lnf_gamma: self.lnf_gamma.cast(),
            lnf_beta: self.lnf_beta.cast(),
            w_out: self.w_out.cast(),
        }
    }

    /// Rebuilds weights from named blocks in canonical order.
    pub(crate) fn from_named(config: ModelConfig, blocks: Vec<(String, Tensor<T>)>) -> Result<Self, LmError> {
        let mut template = Self::init(&config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = template
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected.len() != blocks.len() {
            return Err(LmError::Checkpoint(format!(
                "expected {} base blocks, found {}",
                expected.len(),
                blocks.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&blocks) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(LmError::Checkpoint(format!(
                    "block `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        for ((_, dst), (_, src)) in template.params_mut().into_iter().zip(blocks) {
            *dst = src;
        }
        Ok(template)
    }
}

pub(crate) fn checksum_params<T: Scalar>(params: &[(String, &Tensor<T>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update((x.to_f64() as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// One low-rank pair: `W_eff = W + (alpha / rank) * B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraBlock<T: Scalar = f32> {
    pub layer: usize,
    pub target: LoraTarget,
    /// `[rank, d_in]`
    pub a: Tensor<T>,
    /// `[d_out, rank]`
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    pub config: LoraConfig,
    pub blocks: Vec<LoraBlock<T>>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Fresh adapter: `B = 0`, `A` Gaussian from `seed`, trainable.
    pub fn new(model: &ModelConfig, config: &LoraConfig, seed: u64) -> Result<Self, LmError> {
        model.validate()?;
        config.validate()?;
        let mut targets = config.targets.clone();
        targets.sort();
        targets.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.d_model;
        let std = config.init_std.unwrap_or(1.0 / (d as f64).sqrt());
        let mut blocks = Vec::new();
        for layer in 0..model.n_layers {
            for &target in &targets {
                blocks.push(LoraBlock {
                    layer,
                    target,
                    a: Tensor::randn(vec![config.rank, d], std, &mut rng).with_requires_grad(true),
                    b: Tensor::zeros(vec![d, config.rank]).with_requires_grad(true),
                });
            }
        }
        Ok(Self {
            config: LoraConfig {
                targets,
                ..config.clone()
            },
            blocks,
        })
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }

    pub fn block(&self, layer: usize, target: LoraTarget) -> Option<&LoraBlock<T>> {
        self.blocks
            .iter()
            .find(|b| b.layer == layer && b.target == target)
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.blocks
            .iter()
            .flat_map(|b| {
                let stem = format!("layers.{}.{}", b.layer, b.target.name());
                [(format!("{stem}.lora_a"), &b.a), (format!("{stem}.lora_b"), &b.b)]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let stem = format!("layers.{}.{}", b.layer, b.target.name());
                [
                    (format!("{stem}.lora_a"), &mut b.a),
                    (format!("{stem}.lora_b"), &mut b.b),
                ]
            })
            .collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn checksum(&self) -> String {
        checksum_params(&self.params())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks that every block fits the given model.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<(), LmError> {
        for b in &self.blocks {
            let ok = b.layer < model.n_layers
                && b.a.shape() == [self.config.rank, model.d_model]
                && b.b.shape() == [model.d_model, self.config.rank];
            if !ok {
                return Err(LmError::Incompatible(format!(
                    "adapter block layers.{}.{} does not fit model {:?}",
                    b.layer,
                    b.target.name(),
                    model
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| LoraBlock {
                    layer: b.layer,
                    target: b.target,
                    a: b.a.cast(),
                    b: b.b.cast(),
                })
                .collect(),
        }
    }
}

/// A scoring head: the shared base plus an optional adapter.
#[derive(Debug, Clone, Copy)]
pub struct Head<'a, T: Scalar = f32> {
    pub base: &'a BaseWeights<T>,
    pub adapter: Option<&'a LoraAdapter<T>>,
}

impl<'a, T: Scalar> Head<'a, T> {
    pub fn base_only(base: &'a BaseWeights<T>) -> Self {
        Self {
            base,
            adapter: None,
        }
    }

    pub fn with_adapter(base: &'a BaseWeights<T>, adapter: &'a LoraAdapter<T>) -> Result<Self, LmError> {
        adapter.check_compatible(&base.config)?;
        Ok(Self {
            base,
            adapter: Some(adapter),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    pub fn shares_base(&self, other: &Head<'_, T>) -> bool {
        std::ptr::eq(self.base, other.base)
    }

    /// Base checksum, plus the adapter's when present.
    pub fn checksum(&self) -> String {
        match self.adapter {
            Some(a) => format!("{}+{}", self.base.checksum(), a.checksum()),
            None => self.base.checksum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = BaseWeights::<f32>::init(&tiny(), 3).unwrap();
        let b = BaseWeights::<f32>::init(&tiny(), 3).unwrap();
        let c = BaseWeights::<f32>::init(&tiny(), 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let w = BaseWeights::<f32>::init(&tiny(), 0).unwrap();
        let names: Vec<_> = w.params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "tok_emb");
        assert_eq!(names.last().unwrap(), "w_out");
    }

    #[test]
    fn fresh_adapter_has_zero_b() {
        let ad = LoraAdapter::<f32>::new(&tiny(), &LoraConfig::default(), 1).unwrap();
        assert_eq!(ad.blocks.len(), 4);
        for b in &ad.blocks {
            assert!(b.b.data().iter().all(|&x| x == 0.0));
            assert!(b.a.data().iter().any(|&x| x != 0.0));
        }
        assert!(ad.block(1, LoraTarget::Value).is_some());
        assert!(ad.block(1, LoraTarget::Key).is_none());
    }

    #[test]
    fn adapter_must_fit_base() {
        let base = BaseWeights::<f32>::init(&tiny(), 0).unwrap();
        let other = ModelConfig {
            d_model: 4,
            ..tiny()
        };
        let ad = LoraAdapter::<f32>::new(&other, &LoraConfig::default(), 1).unwrap();
        assert!(Head::with_adapter(&base, &ad).is_err());
    }
}
