//! Input reconstruction from embeddings (WMI, BMI) and from gradients (WGI, BGI).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{resolve_guess, total_variation, AttackConfig, AttackName, AttackReport, PassportGuess, Recovered};
use crate::error::{Error, Result};
use crate::metrics::mse_recovery;
use crate::model::{output_dim, LayerSpec, Model, ParamKind};
use crate::numcore::{softmax, softmax_xent_soft, Tensor};
use crate::passport::Obfuscation;

/// Norm of the parameter-space step used to differentiate the
/// gradient-matching loss.
const FD_STEP: f64 = 1e-4;

fn obfuscation(fixed: &Option<(Vec<f64>, Vec<f64>)>) -> Obfuscation<'_> {
    match fixed {
        Some((gamma, beta)) => Obfuscation::Fixed { gamma, beta },
        None => Obfuscation::Plain,
    }
}

fn batched(n: usize, input_shape: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(input_shape);
    s
}

fn clamp_unit(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn feature_report(name: AttackName, descriptor: String, truth: &Tensor, x: Tensor) -> Result<AttackReport> {
    truth.check_same_shape(&x)?;
    Ok(AttackReport {
        attack_name: name,
        target_descriptor: descriptor,
        recovery_error: mse_recovery(truth, &x)?,
        recovered: Recovered::Features(x),
    })
}

/// White-box model inversion: projected gradient descent on
/// `|G(x) - H|^2 / dim(H) + tv_lambda * TV(x) / pixels` per sample, where
/// `G` is `bottom` with the attacker's passport guess in place of the real
/// passports. Best objective over `cfg.restarts` uniform starts.
pub fn wmi_attack(
    bottom: &Model,
    h_target: &Tensor,
    input_shape: &[usize],
    guess: PassportGuess,
    cfg: &AttackConfig,
    truth: &Tensor,
) -> Result<AttackReport> {
    cfg.validate()?;
    let n = h_target.shape()[0];
    if n == 0 {
        return Err(Error::Argument("empty embedding batch".into()));
    }
    let dh = (h_target.len() / n) as f64;
    let pixels = input_shape.iter().product::<usize>() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed = resolve_guess(bottom, guess, &mut rng)?;
    let obf = obfuscation(&fixed);

    let mut best: Option<(f64, Tensor)> = None;
    for _ in 0..cfg.restarts {
        let mut x = Tensor::uniform(&batched(n, input_shape), 0.0, 1.0, &mut rng);
        let mut obj = f64::INFINITY;
        for it in 0..=cfg.iterations {
            let (h, cache) = bottom.forward(&x, obf)?;
            let diff = h.sub(h_target)?;
            let (tv, g_tv) = total_variation(&x);
            obj = diff.sq_norm() / dh + cfg.tv_lambda * tv / pixels;
            if !obj.is_finite() {
                return Err(Error::Numeric("model inversion loss is not finite".into()));
            }
            if it == cfg.iterations {
                break;
            }
            let mut g = bottom.backward(&cache, &diff.scale(2.0 / dh))?.x;
            g.axpy(cfg.tv_lambda / pixels, &g_tv)?;
            x.axpy(-cfg.learning_rate, &g)?;
            clamp_unit(&mut x);
        }
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    let (_, x) = best.expect("at least one restart");
    let descriptor = format!("{n} embeddings of width {dh}, passport guess {guess:?}");
    feature_report(AttackName::Wmi, descriptor, truth, x)
}

fn flat_rows(t: &Tensor) -> DMatrix<f64> {
    let n = t.shape()[0];
    let d = if n == 0 { 0 } else { t.len() / n };
    DMatrix::from_row_slice(n, d, t.data())
}

fn with_intercept(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().insert_column(m.ncols(), 1.0)
}

/// Least-squares affine map `[inputs, 1] B ~ targets` (minimum-norm when
/// the system is underdetermined).
pub(crate) fn fit_affine(inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = with_intercept(inputs);
    let scale = 1e-12 * a.nrows().max(a.ncols()) as f64;
    let svd = a.svd(true, true);
    let tol = svd.singular_values.max() * scale;
    let b = svd.solve(targets, tol).map_err(|e| Error::Numeric(e.to_string()))?;
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("least-squares fit is not finite".into()));
    }
    Ok(b)
}

pub(crate) fn apply_affine(inputs: &DMatrix<f64>, coef: &DMatrix<f64>) -> DMatrix<f64> {
    with_intercept(inputs) * coef
}

/// Black-box model inversion: fits an affine inverse `H -> x` on the
/// attacker's query pairs and applies it to `h_target`.
pub fn bmi_attack(aux_x: &Tensor, aux_h: &Tensor, h_target: &Tensor, truth: &Tensor) -> Result<AttackReport> {
    let m = aux_x.shape()[0];
    if m < 2 {
        return Err(Error::Config(format!("black-box inversion needs at least 2 query pairs, got {m}")));
    }
    if aux_h.shape()[0] != m {
        return Err(Error::Dimension(format!(
            "{m} query inputs but {} embeddings",
            aux_h.shape()[0]
        )));
    }
    if h_target.last_dim() != aux_h.last_dim() {
        return Err(Error::Dimension("target embedding width differs from the query embeddings".into()));
    }
    let coef = fit_affine(&flat_rows(aux_h), &flat_rows(aux_x))?;
    let pred = apply_affine(&flat_rows(h_target), &coef);
    let mut shape = aux_x.shape().to_vec();
    shape[0] = h_target.shape()[0];
    let data: Vec<f64> = pred.transpose().iter().copied().collect();
    let x = Tensor::new(shape, data)?;
    let descriptor = format!("{} embeddings, affine inverse fit on {m} queries", h_target.shape()[0]);
    feature_report(AttackName::Bmi, descriptor, truth, x)
}

/// The entries of `grads` (in [`Model::params`] order) that belong to host
/// layers: what is visible to an observer of the host parameters.
pub fn host_grads(model: &Model, grads: &[Tensor]) -> Result<Vec<Tensor>> {
    let kinds = model.param_kinds();
    if kinds.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            kinds.len()
        )));
    }
    Ok(kinds
        .iter()
        .zip(grads)
        .filter(|(k, _)| **k == ParamKind::Host)
        .map(|(_, g)| g.clone())
        .collect())
}

struct Matcher<'a> {
    model: &'a Model,
    obf: Obfuscation<'a>,
    host_idx: Vec<usize>,
    observed: &'a [Tensor],
    observed_sq: f64,
}

impl Matcher<'_> {
    /// `(d loss/d x, d loss/d soft-label)` for `model` at `(x, p)`.
    fn input_grads(&self, model: &Model, x: &Tensor, p: &Tensor) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
        let (logits, cache) = model.forward(x, self.obf)?;
        let (_, g_logits, g_p) = softmax_xent_soft(&logits, p)?;
        let g = model.backward(&cache, &g_logits)?;
        Ok((g.x, g_p, g.params))
    }

    /// Normalised matching loss and the residual per matched parameter.
    fn residual(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut r = Vec::with_capacity(self.host_idx.len());
        let mut sq = 0.0;
        for (&i, obs) in self.host_idx.iter().zip(self.observed) {
            let d = params[i].sub(obs)?;
            sq += d.sq_norm();
            r.push(d);
        }
        Ok((sq / self.observed_sq, r))
    }

    fn shifted(&self, r: &[Tensor], t: f64) -> Result<Model> {
        let mut m = self.model.clone();
        {
            let mut ps = m.params_mut();
            for (&i, d) in self.host_idx.iter().zip(r) {
                ps[i].axpy(t, d)?;
            }
        }
        Ok(m)
    }
}

fn softmax_vjp(p: &Tensor, v: &Tensor) -> Result<Tensor> {
    let inner = p.dot(v)?;
    p.zip_map(v, |pk, vk| pk * (vk - inner))
}

/// Gradient matching against `observed` (the host-parameter gradients of
/// one sample). The derivative of the matching loss w.r.t. the dummy input
/// uses `d/dx <grad_theta l, r> = d/dt grad_x l(theta + t r)`, evaluated by
/// a central difference in parameter space.
fn gradient_inversion(
    model: &Model,
    fixed: &Option<(Vec<f64>, Vec<f64>)>,
    observed: &[Tensor],
    input_shape: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let host_idx: Vec<usize> = model
        .param_kinds()
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == ParamKind::Host)
        .map(|(i, _)| i)
        .collect();
    if host_idx.len() != observed.len() {
        return Err(Error::Dimension(format!(
            "{} observed gradients for {} host parameters",
            observed.len(),
            host_idx.len()
        )));
    }
    let params = model.params();
    for (&i, g) in host_idx.iter().zip(observed) {
        params[i].check_same_shape(g)?;
    }
    let observed_sq: f64 = observed.iter().map(Tensor::sq_norm).sum();
    if !observed_sq.is_finite() {
        return Err(Error::Numeric("observed gradients are not finite".into()));
    }
    if observed_sq == 0.0 {
        return Err(Error::Degenerate("observed gradients are all zero".into()));
    }
    let m = Matcher {
        model,
        obf: obfuscation(fixed),
        host_idx,
        observed,
        observed_sq,
    };
    let classes = output_dim(model)?;
    let pixels = input_shape.iter().product::<usize>() as f64;

    let mut best: Option<(f64, Tensor)> = None;
    for _ in 0..cfg.restarts {
        let mut x = Tensor::uniform(&batched(1, input_shape), 0.0, 1.0, rng);
        let mut z = Tensor::randn(&[1, classes], 1.0, rng);
        let mut obj = f64::INFINITY;
        for it in 0..=cfg.iterations {
            let p = softmax(&z);
            let (_, _, grads) = m.input_grads(model, &x, &p)?;
            let (matching, r) = m.residual(&grads)?;
            let (tv, g_tv) = total_variation(&x);
            obj = matching + cfg.tv_lambda * tv / pixels;
            if !obj.is_finite() {
                return Err(Error::Numeric("gradient matching loss is not finite".into()));
            }
            let r_norm = r.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if it == cfg.iterations || r_norm == 0.0 {
                break;
            }
            let t = FD_STEP / r_norm;
            let (gx_hi, gp_hi, _) = m.input_grads(&m.shifted(&r, t)?, &x, &p)?;
            let (gx_lo, gp_lo, _) = m.input_grads(&m.shifted(&r, -t)?, &x, &p)?;
            // d(matching)/d(.) = 2 <J, r> / observed_sq, with <J, r> ~ (hi - lo) / 2t
            let k = 1.0 / (t * observed_sq);
            let mut gx = gx_hi.sub(&gx_lo)?.scale(k);
            gx.axpy(cfg.tv_lambda / pixels, &g_tv)?;
            let gz = softmax_vjp(&p, &gp_hi.sub(&gp_lo)?.scale(k))?;
            x.axpy(-cfg.learning_rate, &gx)?;
            clamp_unit(&mut x);
            z.axpy(-cfg.learning_rate, &gz)?;
        }
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// White-box gradient inversion (DLG): the attacker knows every host weight
/// and sees the host-parameter gradients of one sample; passports are
/// replaced by `guess`.
pub fn wgi_attack(
    observed: &[Tensor],
    model: &Model,
    guess: PassportGuess,
    input_shape: &[usize],
    cfg: &AttackConfig,
    truth: &Tensor,
) -> Result<AttackReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fixed = resolve_guess(model, guess, &mut rng)?;
    let x = gradient_inversion(model, &fixed, observed, input_shape, cfg, &mut rng)?;
    let descriptor = format!("one sample of shape {input_shape:?}, passport guess {guess:?}");
    feature_report(AttackName::Wgi, descriptor, truth, x)
}

/// Black-box gradient inversion: same matching procedure against a freshly
/// initialised surrogate of the known architecture (host layers only).
pub fn bgi_attack(
    observed: &[Tensor],
    architecture: &[LayerSpec],
    input_shape: &[usize],
    cfg: &AttackConfig,
    truth: &Tensor,
) -> Result<AttackReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let surrogate = Model::from_specs(architecture, &mut rng)?.host_view();
    let x = gradient_inversion(&surrogate, &None, observed, input_shape, cfg, &mut rng)?;
    let descriptor = format!("one sample of shape {input_shape:?}, surrogate of {} layers", architecture.len());
    feature_report(AttackName::Bgi, descriptor, truth, x)
}
