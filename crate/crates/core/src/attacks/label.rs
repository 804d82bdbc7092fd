//! Label recovery: passive model completion and gradient scoring.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inversion::{apply_affine, fit_affine};
use super::{AttackConfig, AttackName, AttackReport, Recovered, DEFAULT_PMC_RIDGE};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::metrics::{argmax_rows, label_recovery_error};
use crate::model::{LayerSpec, Model};
use crate::numcore::{mse_loss, Sgd, SgdConfig, Tensor};
use crate::passport::Obfuscation;

/// Attack head fitted on the auxiliary embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum PmcHead {
    /// Affine map to one-hot labels by least squares. `ridge` penalises the
    /// weights (not the intercept) by `ridge * trace(C) / dim`, with `C` the
    /// centred embedding scatter, so the fit is unchanged by a global
    /// rescaling of the embeddings.
    Linear {
        #[serde(default = "default_ridge")]
        ridge: f64,
    },
    /// One hidden ReLU layer, trained by full-batch gradient descent on the
    /// same squared error.
    Mlp { hidden: usize },
}

fn default_ridge() -> f64 {
    DEFAULT_PMC_RIDGE
}

impl Default for PmcHead {
    fn default() -> Self {
        PmcHead::Linear { ridge: DEFAULT_PMC_RIDGE }
    }
}

/// Ridge fit with centred inputs and a free intercept; returns the scores
/// for `test`.
fn ridge_scores(h: &DMatrix<f64>, y: &DMatrix<f64>, test: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let mean_h = h.row_mean();
    let mean_y = y.row_mean();
    let hc = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(r, c)] - mean_h[c]);
    let yc = DMatrix::from_fn(y.nrows(), y.ncols(), |r, c| y[(r, c)] - mean_y[c]);
    let mut a = hc.transpose() * &hc;
    let lambda = ridge * a.trace() / h.ncols() as f64;
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric("ridge system is not positive definite".into()))?;
    let w = chol.solve(&(hc.transpose() * yc));
    let mut out = DMatrix::from_fn(test.nrows(), test.ncols(), |r, c| test[(r, c)] - mean_h[c]) * w;
    for mut row in out.row_iter_mut() {
        row += &mean_y;
    }
    Ok(out)
}

fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), classes, |r, c| f64::from(u8::from(labels[r] == c)))
}

fn rows(t: &Tensor) -> DMatrix<f64> {
    let n = t.shape()[0];
    DMatrix::from_row_slice(n, t.len() / n.max(1), t.data())
}

fn to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    Tensor::new(vec![m.nrows(), m.ncols()], m.transpose().iter().copied().collect())
}

/// Passive model completion: the attacker embeds its labeled auxiliary
/// samples with its own frozen bottom (and its own passports), fits `head`
/// to map embeddings to one-hot labels, and labels `test`.
pub fn pmc_attack(
    bottom: &Model,
    obf: Obfuscation<'_>,
    aux: &Dataset,
    test: &Dataset,
    head: PmcHead,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    let classes = aux.num_classes;
    if aux.len() < classes {
        return Err(Error::Config(format!(
            "model completion needs at least {classes} auxiliary samples, got {}",
            aux.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let h_aux = bottom.predict(&aux.features, obf)?;
    let h_test = bottom.predict(&test.features, obf)?;
    let y = one_hot(&aux.labels, classes);
    let scores = match head {
        PmcHead::Linear { ridge } => {
            if !(ridge >= 0.0) || !ridge.is_finite() {
                return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
            }
            if ridge == 0.0 {
                let coef = fit_affine(&rows(&h_aux), &y)?;
                to_tensor(&apply_affine(&rows(&h_test), &coef))?
            } else {
                to_tensor(&ridge_scores(&rows(&h_aux), &y, &rows(&h_test), ridge)?)?
            }
        }
        PmcHead::Mlp { hidden } => {
            cfg.validate()?;
            if hidden == 0 {
                return Err(Error::Config("hidden width must be positive".into()));
            }
            let d = h_aux.len() / h_aux.shape()[0];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let specs = [
                LayerSpec::Dense { inputs: d, outputs: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: hidden, outputs: classes },
            ];
            let mut net = Model::from_specs(&specs, &mut rng)?;
            let target = to_tensor(&y)?;
            let mut opt = Sgd::new(SgdConfig::plain(cfg.learning_rate));
            for _ in 0..cfg.iterations {
                let (out, cache) = net.forward(&h_aux, Obfuscation::Plain)?;
                let (_, g) = mse_loss(&out, &target)?;
                let grads = net.backward(&cache, &g)?;
                opt.step(&mut net.params_mut(), &grads.params)?;
            }
            net.predict(&h_test, Obfuscation::Plain)?
        }
    };
    let pred = argmax_rows(&scores);
    Ok(AttackReport {
        attack_name: AttackName::Pmc,
        target_descriptor: format!("{} test samples, {} auxiliary, head {head:?}", test.len(), aux.len()),
        recovery_error: label_recovery_error(&pred, &test.labels)?,
        recovered: Recovered::Labels(pred),
    })
}

/// Norm score: `|g_i|` per row of `per_sample_grads`.
pub fn ns_attack(per_sample_grads: &Tensor) -> Result<Vec<f64>> {
    let n = per_sample_grads.shape()[0];
    if n == 0 {
        return Err(Error::Argument("no gradients to score".into()));
    }
    Ok((0..n)
        .map(|i| per_sample_grads.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Direction score: cosine of each row with `reference`. Rows with zero
/// norm score zero.
pub fn ds_attack(per_sample_grads: &Tensor, reference: &[f64]) -> Result<Vec<f64>> {
    let n = per_sample_grads.shape()[0];
    if n == 0 {
        return Err(Error::Argument("no gradients to score".into()));
    }
    if reference.len() != per_sample_grads.len() / n {
        return Err(Error::Dimension(format!(
            "reference has {} entries, gradients have {}",
            reference.len(),
            per_sample_grads.len() / n
        )));
    }
    let rn = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rn == 0.0 {
        return Err(Error::Argument("reference gradient has zero norm".into()));
    }
    Ok((0..n)
        .map(|i| {
            let row = per_sample_grads.row(i);
            let gn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn == 0.0 {
                0.0
            } else {
                row.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>() / (gn * rn)
            }
        })
        .collect())
}

/// `1 - AUC` of `scores` as a detector of label 1 (ties count one half):
/// 0 when every positive outscores every negative, 0.5 for constant scores.
pub fn score_recovery_error(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Argument(format!("scoring attacks need binary labels, found {bad}")));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Argument("both labels must be present".into()));
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(1.0 - wins / (pos.len() * neg.len()) as f64)
}

/// Packs NS/DS scores into a report scored against `labels`.
pub fn score_report(name: AttackName, scores: Vec<f64>, labels: &[usize]) -> Result<AttackReport> {
    if !matches!(name, AttackName::Ns | AttackName::Ds) {
        return Err(Error::Argument(format!("{} is not a scoring attack", name.as_str())));
    }
    Ok(AttackReport {
        attack_name: name,
        target_descriptor: format!("{} per-sample gradients", scores.len()),
        recovery_error: score_recovery_error(&scores, labels)?,
        recovered: Recovered::Scores(scores),
    })
}
