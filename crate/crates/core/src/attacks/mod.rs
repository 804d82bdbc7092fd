//! Feature-recovery attacks (WMI, BMI, WGI, BGI) and label-recovery attacks
//! (PMC, NS, DS). Every attack is a pure function of a frozen target and an
//! [`AttackConfig`]; the ground truth is taken only to score the result.

mod inversion;
mod label;

pub use inversion::{bgi_attack, bmi_attack, host_grads, wgi_attack, wmi_attack};
pub use label::{ds_attack, ns_attack, pmc_attack, score_recovery_error, score_report, PmcHead};

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::Tensor;
use crate::passport::generate_passport;

pub const DEFAULT_TV_LAMBDA: f64 = 0.1;
/// Labeled auxiliary samples available to the model-completion attacker.
pub const DEFAULT_AUX_SIZE: usize = 40;
/// Relative ridge of the linear completion head; 40 samples against a
/// 32-wide embedding overfit badly without it.
pub const DEFAULT_PMC_RIDGE: f64 = 0.1;

fn default_tv() -> f64 {
    DEFAULT_TV_LAMBDA
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    #[serde(default = "default_tv")]
    pub tv_lambda: f64,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::Config("attack iterations and restarts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "attack learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.tv_lambda >= 0.0) || !self.tv_lambda.is_finite() {
            return Err(Error::Config(format!(
                "tv_lambda must be non-negative, got {}",
                self.tv_lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    Wmi,
    Bmi,
    Wgi,
    Bgi,
    Pmc,
    Ns,
    Ds,
}

impl AttackName {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackName::Wmi => "wmi",
            AttackName::Bmi => "bmi",
            AttackName::Wgi => "wgi",
            AttackName::Bgi => "bgi",
            AttackName::Pmc => "pmc",
            AttackName::Ns => "ns",
            AttackName::Ds => "ds",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovered {
    Features(Tensor),
    Labels(Vec<usize>),
    /// Per-sample scores; higher means "positive".
    Scores(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_name: AttackName,
    pub target_descriptor: String,
    pub recovered: Recovered,
    pub recovery_error: f64,
}

impl AttackReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// What a white-box attacker plugs in for the passport layer it cannot see.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "guess", rename_all = "snake_case")]
pub enum PassportGuess {
    /// `gamma = 1`, `beta = 0`: the attacker ignores the passport layer.
    #[default]
    Identity,
    /// Draw a passport from the assumed generator and push it through the
    /// known host weights (the autoencoder is unknown).
    Random { mean_range: f64, variance: f64 },
}

/// Fixed `(gamma, beta)` the attacker uses, or `None` for a model without a
/// passport layer.
pub(crate) fn resolve_guess<R: Rng + ?Sized>(
    model: &Model,
    guess: PassportGuess,
    rng: &mut R,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let Some(layer) = model.passport_layer() else {
        return Ok(None);
    };
    let oc = layer.out_channels();
    match guess {
        PassportGuess::Identity => Ok(Some((vec![1.0; oc], vec![0.0; oc]))),
        PassportGuess::Random { mean_range, variance } => {
            let params = layer.gen_params(mean_range, variance);
            let p = generate_passport(&params, rng)?;
            Ok(Some((
                layer.host_projection(&p.gamma.values)?,
                layer.host_projection(&p.beta.values)?,
            )))
        }
    }
}

/// Anisotropic total variation summed over the last two axes of every
/// sample, with its subgradient. Inputs with fewer than three axes (batch
/// plus a flat feature axis) have no spatial structure and get zero.
pub fn total_variation(x: &Tensor) -> (f64, Tensor) {
    let mut grad = Tensor::zeros_like(x);
    if x.ndim() < 3 {
        return (0.0, grad);
    }
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w);
    let d = x.data();
    let g = grad.data_mut();
    let mut tv = 0.0;
    for p in 0..planes {
        let o = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let a = o + i * w + j;
                if j + 1 < w {
                    let diff = d[a + 1] - d[a];
                    tv += diff.abs();
                    let sg = sign(diff);
                    g[a + 1] += sg;
                    g[a] -= sg;
                }
                if i + 1 < h {
                    let diff = d[a + w] - d[a];
                    tv += diff.abs();
                    let sg = sign(diff);
                    g[a + w] += sg;
                    g[a] -= sg;
                }
            }
        }
    }
    (tv, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Writes a binary (P5) grayscale image; values are clamped to `[0, 1]`.
pub fn write_pgm(path: &Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::Dimension(format!(
            "{} pixels for a {height}x{width} image",
            pixels.len()
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}
