//! Fixed-obfuscation baselines applied to whatever leaves a party.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    DpGaussian { noise_level: f64 },
    Sparsify { keep_fraction: f64 },
}

/// Which exchanged quantity a defense perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseTarget {
    #[default]
    Gradients,
    Embeddings,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct DefenseConfig {
    #[serde(flatten)]
    pub kind: DefenseKind,
    #[serde(default)]
    pub applies_to: DefenseTarget,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DefenseKind::None => Ok(()),
            DefenseKind::DpGaussian { noise_level } => {
                if noise_level >= 0.0 && noise_level.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("noise level must be >= 0, got {noise_level}")))
                }
            }
            DefenseKind::Sparsify { keep_fraction } => {
                if keep_fraction > 0.0 && keep_fraction <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "keep fraction must be in (0, 1], got {keep_fraction}"
                    )))
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            DefenseKind::None => "none".into(),
            DefenseKind::DpGaussian { .. } => "dp".into(),
            DefenseKind::Sparsify { .. } => "sparsify".into(),
        }
    }

    /// Applies the defense if it targets `what`; otherwise returns `t` unchanged.
    pub fn apply<R: Rng + ?Sized>(&self, t: &Tensor, what: DefenseTarget, rng: &mut R) -> Result<Tensor> {
        if what != self.applies_to {
            return Ok(t.clone());
        }
        match self.kind {
            DefenseKind::None => Ok(t.clone()),
            DefenseKind::DpGaussian { noise_level } => dp_perturb(t, noise_level, rng),
            DefenseKind::Sparsify { keep_fraction } => sparsify(t, keep_fraction),
        }
    }
}

/// `t + Normal(0, noise_level²)` elementwise.
pub fn dp_perturb<R: Rng + ?Sized>(t: &Tensor, noise_level: f64, rng: &mut R) -> Result<Tensor> {
    let normal = Normal::new(0.0, noise_level)
        .map_err(|e| Error::Argument(format!("noise level {noise_level}: {e}")))?;
    let mut out = t.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

/// Keeps the `ceil(keep_fraction * n)` largest-magnitude entries; ties go to
/// the lower flat index.
pub fn sparsify(t: &Tensor, keep_fraction: f64) -> Result<Tensor> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "keep fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let n = t.len();
    let k = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let d = t.data();
    idx.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    let mut out = Tensor::zeros_like(t);
    for &i in &idx[..k] {
        out.data_mut()[i] = d[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dp_zero_noise_is_identity() {
        let t = Tensor::vector(vec![1.0, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dp_perturb(&t, 0.0, &mut rng).unwrap(), t);
    }

    #[test]
    fn dp_noise_std() {
        let t = Tensor::zeros(&[100_000]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = dp_perturb(&t, 0.3, &mut rng).unwrap();
        let var = out.sq_norm() / out.len() as f64 - out.mean().powi(2);
        assert!((var.sqrt() - 0.3).abs() < 0.015);
        let again = dp_perturb(&t, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn sparsify_examples() {
        let t = Tensor::vector(vec![3.0, -1.0, 2.0]);
        assert_eq!(sparsify(&t, 1.0).unwrap(), t);
        assert_eq!(sparsify(&t, 1.0 / 3.0).unwrap().data(), &[3.0, 0.0, 0.0]);
        let ties = Tensor::vector(vec![1.0, -1.0, 1.0, 0.5]);
        assert_eq!(sparsify(&ties, 0.5).unwrap().data(), &[1.0, -1.0, 0.0, 0.0]);
        assert!(sparsify(&t, 0.0).is_err());
    }

    #[test]
    fn config_serde_shape() {
        let c: DefenseConfig =
            toml::from_str("kind = \"dp_gaussian\"\nnoise_level = 0.5\napplies_to = \"embeddings\"").unwrap();
        assert_eq!(c.kind, DefenseKind::DpGaussian { noise_level: 0.5 });
        assert_eq!(c.applies_to, DefenseTarget::Embeddings);
        let bad = DefenseConfig {
            kind: DefenseKind::Sparsify { keep_fraction: 1.5 },
            applies_to: DefenseTarget::Gradients,
        };
        assert!(bad.validate().is_err());
    }
}
