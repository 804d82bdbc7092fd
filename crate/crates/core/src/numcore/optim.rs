use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Rescale each parameter's gradient to at most this norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl SgdConfig {
    pub fn plain(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            weight_decay: 0.0,
            momentum: 0.0,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so frozen runs can be expressed.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 4e-5,
            momentum: 0.0,
            clip_norm: None,
        }
    }
}

/// SGD with optional heavy-ball momentum and L2 weight decay:
/// `v <- m v + (g + wd p)`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return dim_err(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            ));
        }
        if self.velocity.is_empty() && self.cfg.momentum > 0.0 {
            self.velocity = grads.iter().map(Tensor::zeros_like).collect();
        }
        let SgdConfig {
            learning_rate: lr,
            weight_decay: wd,
            momentum: mom,
            clip_norm,
        } = self.cfg;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.check_same_shape(g)?;
            let clipped;
            let g = match clip_norm {
                Some(c) if g.norm() > c => {
                    clipped = g.scale(c / g.norm());
                    &clipped
                }
                _ => g,
            };
            if mom > 0.0 {
                let v = &mut self.velocity[i];
                v.check_same_shape(g)?;
                for ((vv, gg), pp) in v.data_mut().iter_mut().zip(g.data()).zip(p.data()) {
                    *vv = mom * *vv + gg + wd * pp;
                }
                let v = &self.velocity[i];
                p.axpy(-lr, v)?;
            } else {
                for (pp, gg) in p.data_mut().iter_mut().zip(g.data()) {
                    *pp -= lr * (gg + wd * *pp);
                }
            }
        }
        Ok(())
    }
}

/// One stateless step without momentum.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], cfg: SgdConfig) -> Result<()> {
    Sgd::new(SgdConfig { momentum: 0.0, ..cfg }).step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_identity() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[2])], SgdConfig::plain(0.5)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut p = Tensor::vector(vec![1.0]);
        sgd_step(&mut [&mut p], &[Tensor::vector(vec![1.0])], SgdConfig::plain(0.1)).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_moves_farther() {
        let g = Tensor::vector(vec![1.0]);
        let mut plain = Tensor::vector(vec![0.0]);
        let mut heavy = Tensor::vector(vec![0.0]);
        let mut a = Sgd::new(SgdConfig::plain(0.1));
        let mut b = Sgd::new(SgdConfig {
            momentum: 0.5,
            ..SgdConfig::plain(0.1)
        });
        for _ in 0..2 {
            a.step(&mut [&mut plain], &[g.clone()]).unwrap();
            b.step(&mut [&mut heavy], &[g.clone()]).unwrap();
        }
        // -0.2 vs -(0.1 + 0.15)
        assert!((plain.data()[0] + 0.2).abs() < 1e-15);
        assert!((heavy.data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_step() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let cfg = SgdConfig {
            clip_norm: Some(1.0),
            ..SgdConfig::plain(1.0)
        };
        sgd_step(&mut [&mut p], &[Tensor::vector(vec![3.0, 4.0])], cfg).unwrap();
        assert!((p.data()[0] + 0.6).abs() < 1e-15 && (p.data()[1] + 0.8).abs() < 1e-15);
        let mut q = Tensor::vector(vec![0.0]);
        sgd_step(&mut [&mut q], &[Tensor::vector(vec![0.5])], cfg).unwrap();
        assert_eq!(q.data(), &[-0.5]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        assert!(sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], SgdConfig::plain(0.1)).is_err());
        assert!(sgd_step(&mut [&mut p], &[], SgdConfig::plain(0.1)).is_err());
    }
}
