use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Adam with weight decay applied to the weights directly (not through the
/// moments), both scaled by the learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamConfig,
    /// Completed update count.
    pub steps: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `params` that received a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a (String, Var)>, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let prev = match self.moments.get(name) {
                Some(m) => m.clone(),
                None => Moments {
                    first: var.zeros_like()?,
                    second: var.zeros_like()?,
                },
            };
            let first = ((prev.first * beta1)? + (g * (1.0 - beta1))?)?;
            let second = ((prev.second * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let adaptive = ((&first / bias1)? / ((&second / bias2)?.sqrt()? + eps)?)?;
            let update = ((adaptive + (var.as_tensor() * wd)?)? * lr)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            self.moments.insert(name.clone(), Moments { first, second });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn quadratic(x: &Var) -> GradStore {
        x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap()
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let x = Var::new(&[1.5f32, -2.0, 0.25], &Device::Cpu).unwrap();
        let before: Vec<f32> = x.to_vec1().unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let mut opt = AdamW::new(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&params, &quadratic(&x)).unwrap();
        let after: Vec<f32> = x.to_vec1().unwrap();
        assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), after.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn first_step_matches_hand_update() {
        // The bias-corrected first step is lr·sign(g) plus decay.
        let x = Var::new(&[2.0f64, -3.0], &Device::Cpu).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&params, &quadratic(&x)).unwrap();
        let got: Vec<f64> = x.to_vec1().unwrap();
        for (v0, v1) in [2.0f64, -3.0].iter().zip(got) {
            let g = 2.0 * v0;
            let adaptive = g / (g * g).sqrt().max(0.0) / (1.0 + cfg.eps / g.abs());
            let expect = v0 - cfg.learning_rate * (adaptive + cfg.weight_decay * v0);
            assert!((v1 - expect).abs() < 1e-12, "{v1} vs {expect}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f32, -1.0], &Device::Cpu).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let mut opt = AdamW::new(AdamConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..400 {
            let g = quadratic(&x);
            opt.step(&params, &g).unwrap();
        }
        let v: Vec<f32> = x.to_vec1().unwrap();
        assert!(v.iter().all(|c| c.abs() < 0.05), "{v:?}");
        assert_eq!(x.dtype(), DType::F32);
    }
}
