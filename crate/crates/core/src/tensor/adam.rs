use super::{Result, Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global-norm gradient clip. Off by default.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
}

/// Bias-corrected Adam over an ordered list of named parameters.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState {
                first_moment: Vec::new(),
                second_moment: Vec::new(),
                step_count: 0,
            },
        }
    }

    /// Applies one update using each tensor's stored gradient, then clears
    /// the gradients. A parameter without a gradient is treated as having a
    /// zero gradient. The whole step is rejected if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<T>)]) -> Result<()> {
        if self.state.step_count == 0 && self.state.first_moment.is_empty() {
            self.state.first_moment = params.iter().map(|(_, p)| vec![T::ZERO; p.numel()]).collect();
            self.state.second_moment = self.state.first_moment.clone();
        }
        if self.state.first_moment.len() != params.len()
            || self
                .state
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, (_, p))| m.len() != p.numel())
        {
            return Err(TensorError::Contract(
                "parameter list does not match optimizer state".into(),
            ));
        }
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFiniteGradient {
                        param: (*name).to_string(),
                    });
                }
            }
        }

        let mut clip = 1.0f64;
        if let Some(max_norm) = self.config.clip_norm {
            let sq: f64 = params
                .iter()
                .filter_map(|(_, p)| p.grad())
                .flat_map(|g| g.iter().map(|x| x.to_f64() * x.to_f64()))
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }

        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (lr, eps, clip) = (T::from_f64(c.lr), T::from_f64(c.eps), T::from_f64(clip));

        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for (((w, &g), mi), vi) in p.data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * clip;
                *mi = b1 * *mi + (T::ONE - b1) * g;
                *vi = b2 * *vi + (T::ONE - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// True when no moment estimate holds NaN or Inf.
    pub fn is_finite(&self) -> bool {
        self.state
            .first_moment
            .iter()
            .chain(&self.state.second_moment)
            .all(|m| m.iter().all(|x| x.is_finite()))
    }
}
