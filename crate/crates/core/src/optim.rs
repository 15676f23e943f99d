//! Named parameter storage and SGD with momentum.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::invalid("SgdConfig", "learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::invalid("SgdConfig", "momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::invalid("SgdConfig", "weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// Named parameter tensors with per-parameter momentum buffers. Insertion
/// order is the iteration order everywhere, which keeps updates and
/// checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    velocity: IndexMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.velocity.insert(name.clone(), vec![0.0; tensor.len()]);
        self.params.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Add a gradient contribution to a named parameter.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| CoreError::invalid("ParamStore", format!("unknown parameter {name}")))?;
        if t.len() != grad.len() {
            return Err(CoreError::ShapeMismatch {
                context: "accumulate_grad",
                expected: format!("{} values", t.len()),
                got: format!("{}", grad.len()),
            });
        }
        for (d, g) in t.grad_mut().iter_mut().zip(grad) {
            *d += g;
        }
        Ok(())
    }

    /// FNV-1a over the little-endian parameter bytes; used by the freeze
    /// contract tests and run logs.
    pub fn content_hash(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            for byte in name.as_bytes() {
                h = (h ^ *byte as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.values() {
                for byte in v.to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// One momentum-SGD update over every parameter selected by `trainable`:
/// v <- mu * v - lr * (g + wd * theta); theta <- theta + v.
/// Parameters without an accumulated gradient are left untouched.
pub fn sgd_step<F>(store: &mut ParamStore, config: &SgdConfig, trainable: F)
where
    F: Fn(&str) -> bool,
{
    for (name, tensor) in store.params.iter_mut() {
        if !trainable(name) {
            continue;
        }
        let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let vel = self::velocity_mut(&mut store.velocity, name, tensor.len());
        for ((theta, v), g) in tensor.values_mut().iter_mut().zip(vel).zip(&grad) {
            *v = config.momentum * *v
                - config.learning_rate * (g + config.weight_decay * *theta);
            *theta += *v;
        }
    }
}

fn velocity_mut<'a>(
    velocity: &'a mut IndexMap<String, Vec<f64>>,
    name: &str,
    len: usize,
) -> &'a mut [f64] {
    velocity
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; len])
}

/// He-normal initialization for conv/fc weights, zero for biases.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| gaussian(rng) * std).collect();
    Tensor::from_values(shape, values).expect("shape/product consistent by construction")
}

/// Box-Muller; two uniform draws per sample keeps the stream deterministic.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(theta: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(theta));
        s.accumulate_grad("w", &[grad]).unwrap();
        s
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store_with(1.0, 0.5);
        let cfg = SgdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        };
        sgd_step(&mut s, &cfg, |_| true);
        assert_eq!(s.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with(1.0, 0.0);
        sgd_step(&mut s, &SgdConfig::default(), |_| true);
        assert_eq!(s.get("w").unwrap().item(), 1.0 - 1e-2 * 1e-4 * 1.0);
        // and with no grad accumulated at all:
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(2.0));
        sgd_step(&mut s, &SgdConfig::default(), |_| true);
        assert_eq!(s.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        };
        let mut s = store_with(1.0, 0.5);
        sgd_step(&mut s, &cfg, |_| true);
        s.zero_grads();
        s.accumulate_grad("w", &[0.25]).unwrap();
        sgd_step(&mut s, &cfg, |_| true);

        // hand unroll
        let (mut theta, mut v) = (1.0f64, 0.0f64);
        v = 0.9 * v - 0.1 * 0.5;
        theta += v;
        v = 0.9 * v - 0.1 * 0.25;
        theta += v;
        assert_eq!(s.get("w").unwrap().item(), theta);
    }

    #[test]
    fn trainable_filter_freezes_parameters() {
        let mut s = ParamStore::new();
        s.insert("shared.w", Tensor::scalar(1.0));
        s.insert("det.w", Tensor::scalar(1.0));
        s.accumulate_grad("shared.w", &[1.0]).unwrap();
        s.accumulate_grad("det.w", &[1.0]).unwrap();
        let before = s.content_hash("shared.");
        sgd_step(&mut s, &SgdConfig::default(), |n| n.starts_with("det."));
        assert_eq!(s.content_hash("shared."), before);
        assert_ne!(s.get("det.w").unwrap().item(), 1.0);
    }

    #[test]
    fn he_init_is_seed_deterministic() {
        use rand::SeedableRng;
        let a = he_normal(&[4, 4], 16, &mut ChaCha8Rng::seed_from_u64(7));
        let b = he_normal(&[4, 4], 16, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.values(), b.values());
    }
}
