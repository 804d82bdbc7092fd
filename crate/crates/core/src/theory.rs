//! Numeric checks of the privacy bounds for linear split models
//! `H = (W_p s^gamma) * (W_p x) + W_p s^beta`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::passport::{generate_passport, PassportGenParams};

/// Smallest singular value accepted for `W_p`.
pub const SINGULAR_FLOOR: f64 = 1e-6;
pub const EQUALITY_TOL: f64 = 1e-9;
pub const THM2_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSplitModel {
    pub w_p: DMatrix<f64>,
    pub w_a: DMatrix<f64>,
    pub s_p_gamma: DVector<f64>,
    pub s_p_beta: DVector<f64>,
    pub s_a_gamma: DVector<f64>,
    pub s_a_beta: DVector<f64>,
}

fn gaussian_matrix<R: Rng + ?Sized>(r: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// A passport vector of length `m` drawn with the usual generator.
pub fn passport_vector<R: Rng + ?Sized>(m: usize, mean_range: f64, variance: f64, rng: &mut R) -> Result<DVector<f64>> {
    let params = PassportGenParams {
        mean_range,
        variance,
        channels: m,
        per_channel_shape: vec![1],
    };
    Ok(DVector::from_vec(generate_passport(&params, rng)?.gamma.values.into_data()))
}

impl LinearSplitModel {
    /// Random `m`-dimensional model with a `classes × m` top; `W_p` is
    /// redrawn until its smallest singular value clears [`SINGULAR_FLOOR`].
    pub fn random<R: Rng + ?Sized>(m: usize, classes: usize, mean_range: f64, variance: f64, rng: &mut R) -> Result<Self> {
        if m == 0 || classes == 0 {
            return Err(Error::Argument("dimensions must be positive".into()));
        }
        let w_p = loop {
            let w = gaussian_matrix(m, m, rng);
            if min_singular(&w) >= SINGULAR_FLOOR {
                break w;
            }
        };
        Ok(Self {
            w_p,
            w_a: gaussian_matrix(classes, m, rng),
            s_p_gamma: passport_vector(m, mean_range, variance, rng)?,
            s_p_beta: passport_vector(m, mean_range, variance, rng)?,
            s_a_gamma: passport_vector(m, mean_range, variance, rng)?,
            s_a_beta: passport_vector(m, mean_range, variance, rng)?,
        })
    }

    fn check_x(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.w_p.ncols() {
            return Err(Error::Dimension(format!(
                "input has {} entries, W_p has {} columns",
                x.len(),
                self.w_p.ncols()
            )));
        }
        Ok(())
    }
}

fn min_singular(w: &DMatrix<f64>) -> f64 {
    w.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

fn spectral_norm(w: &DMatrix<f64>) -> f64 {
    w.singular_values().iter().copied().fold(0.0, f64::max)
}

fn require_full_column_rank(w: &DMatrix<f64>) -> Result<()> {
    if w.nrows() < w.ncols() || min_singular(w) < SINGULAR_FLOOR {
        return Err(Error::Precondition(
            "W_p does not have linearly independent columns".into(),
        ));
    }
    Ok(())
}

/// `W⁺ b` through the SVD.
fn pinv_apply(w: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    w.clone()
        .svd(true, true)
        .solve(b, 1e-300)
        .map_err(|e| Error::Numeric(e.to_string()))
}

pub fn linear_bottom_forward(m: &LinearSplitModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    m.check_x(x)?;
    if m.s_p_gamma.len() != m.w_p.ncols() || m.s_p_beta.len() != m.w_p.ncols() {
        return Err(Error::Dimension("passport length differs from W_p columns".into()));
    }
    let g = &m.w_p * &m.s_p_gamma;
    Ok(g.component_mul(&(&m.w_p * x)) + &m.w_p * &m.s_p_beta)
}

/// `(‖x − x̂‖, ‖s − s'‖)` for `H = W_p x + W_p s` and `x̂ = W_p⁺(H − W_p s')`.
pub fn lemma1_beta_check(
    m: &LinearSplitModel,
    x: &DVector<f64>,
    s_true: &DVector<f64>,
    s_guess: &DVector<f64>,
) -> Result<(f64, f64)> {
    m.check_x(x)?;
    require_full_column_rank(&m.w_p)?;
    let h = &m.w_p * (x + s_true);
    let x_hat = pinv_apply(&m.w_p, &(h - &m.w_p * s_guess))?;
    Ok(((x - x_hat).norm(), (s_true - s_guess).norm()))
}

/// `(‖x − x̂‖, ‖(D⁻¹ − D'⁻¹)H‖ / ‖W_p‖₂)` for `H = D W_p x`, `D = diag(W_p s)`.
pub fn lemma1_gamma_check(
    m: &LinearSplitModel,
    x: &DVector<f64>,
    s_true: &DVector<f64>,
    s_guess: &DVector<f64>,
) -> Result<(f64, f64)> {
    m.check_x(x)?;
    require_full_column_rank(&m.w_p)?;
    let d = &m.w_p * s_true;
    let d_guess = &m.w_p * s_guess;
    if d.iter().chain(d_guess.iter()).any(|&v| v == 0.0) {
        return Err(Error::Precondition("diag(W_p s) has a zero entry".into()));
    }
    let h = d.component_mul(&(&m.w_p * x));
    let unscaled = h.component_div(&d_guess);
    let x_hat = pinv_apply(&m.w_p, &unscaled)?;
    let gap = h.component_div(&d) - unscaled;
    Ok(((x - x_hat).norm(), gap.norm() / spectral_norm(&m.w_p)))
}

/// Gradient-matching recovery for `H = W_p(x + s) + b` under the loss
/// `½‖H − target‖²`. Returns `(‖x − x̂‖, ‖s − s'‖)`.
pub fn lemma3_gradient_check(
    m: &LinearSplitModel,
    x: &DVector<f64>,
    target: &DVector<f64>,
    s_true: &DVector<f64>,
    s_guess: &DVector<f64>,
) -> Result<(f64, f64)> {
    m.check_x(x)?;
    if target.len() != m.w_p.nrows() {
        return Err(Error::Dimension("target length differs from W_p rows".into()));
    }
    let input = x + s_true;
    let grad_b = &m.w_p * &input - target;
    let nb = grad_b.norm_squared();
    if nb == 0.0 {
        return Err(Error::Degenerate("bias gradient is zero".into()));
    }
    let grad_w = &grad_b * input.transpose();
    let x_hat = grad_w.transpose() * &grad_b / nb - s_guess;
    Ok(((x - x_hat).norm(), (s_true - s_guess).norm()))
}

/// `Γ(k/2)` for positive integer `k`.
pub fn gamma_half(k: u32) -> f64 {
    assert!(k > 0, "gamma_half needs k >= 1");
    let (mut g, mut x) = if k % 2 == 0 { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
    while 2.0 * x < k as f64 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Volume of an `m`-ball of radius `eps` over the volume of `(−N, 0)^m`.
pub fn thm1_bound(m: u32, mean_range: f64, eps: f64) -> f64 {
    let mf = m as f64;
    std::f64::consts::PI.powf(mf / 2.0) * eps.powf(mf) / (gamma_half(m + 2) * mean_range.powf(mf))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm1Cell {
    pub m: u32,
    pub mean_range: f64,
    pub eps: f64,
    pub trials: u64,
    pub p_hat: f64,
    pub bound: f64,
}

impl Thm1Cell {
    /// `bound + 3·sqrt(bound(1 − bound)/trials) − p_hat`; negative is a violation.
    pub fn margin(&self) -> f64 {
        let b = self.bound.min(1.0);
        self.bound + 3.0 * (b * (1.0 - b) / self.trials as f64).sqrt() - self.p_hat
    }
}

/// Fraction of uniform guesses in `(−N, 0)^m` landing within `eps` of a
/// uniformly drawn secret.
pub fn thm1_mc_probability<R: Rng + ?Sized>(m: u32, mean_range: f64, eps: f64, trials: u64, rng: &mut R) -> Result<Thm1Cell> {
    if trials < 10_000 {
        return Err(Error::Config(format!("need at least 10^4 trials, got {trials}")));
    }
    if m == 0 || !(mean_range > 0.0) || !(eps > 0.0) {
        return Err(Error::Config("dimension, range and radius must be positive".into()));
    }
    if eps >= mean_range {
        return Err(Error::Config(format!(
            "radius {eps} is not below the range {mean_range}; the bound is vacuous"
        )));
    }
    let u = Uniform::new(-mean_range, 0.0).map_err(|e| Error::Config(e.to_string()))?;
    let secret: Vec<f64> = (0..m).map(|_| u.sample(rng)).collect();
    let mut hits = 0u64;
    for _ in 0..trials {
        let d2: f64 = secret
            .iter()
            .map(|&s| {
                let d = u.sample(rng) - s;
                d * d
            })
            .sum();
        if d2 <= eps * eps {
            hits += 1;
        }
    }
    Ok(Thm1Cell {
        m,
        mean_range,
        eps,
        trials,
        p_hat: hits as f64 / trials as f64,
        bound: thm1_bound(m, mean_range, eps),
    })
}

/// `diag(W_a s) W_a`
pub fn top_transform(w_a: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let d = w_a * s;
    let mut t = w_a.clone();
    for (i, mut row) in t.row_iter_mut().enumerate() {
        row *= d[i];
    }
    t
}

fn thm2_objective(w: &DMatrix<f64>, ts: &[DMatrix<f64>], hs: &[DVector<f64>]) -> f64 {
    ts.iter().zip(hs).map(|(t, h)| ((w - t) * h).norm()).sum()
}

/// Geometric median of `points` (Weiszfeld with the Vardi-Zhang step, which
/// also converges when the median sits on a data point).
pub fn geometric_median(points: &[DVector<f64>]) -> Result<DVector<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Argument("geometric median of no points".into()));
    }
    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let mut y = points.iter().fold(DVector::zeros(points[0].len()), |a, p| a + p) / n as f64;
    for _ in 0..100_000 {
        let mut coincident = 0usize;
        let mut wsum = 0.0;
        let mut num = DVector::zeros(y.len());
        let mut pull = DVector::zeros(y.len());
        for p in points {
            let d = (p - &y).norm();
            if d <= 1e-15 * scale {
                coincident += 1;
                continue;
            }
            wsum += 1.0 / d;
            num += p / d;
            pull += (p - &y) / d;
        }
        if wsum == 0.0 {
            return Ok(y);
        }
        let r = pull.norm();
        if r <= coincident as f64 {
            return Ok(y);
        }
        let t = num / wsum;
        let eta = coincident as f64 / r;
        let next = &t * (1.0 - eta).max(0.0) + &y * eta.min(1.0);
        let step = (&next - &y).norm();
        y = next;
        if step <= 1e-13 * scale {
            return Ok(y);
        }
    }
    Err(Error::Numeric("geometric median iteration did not converge".into()))
}

/// `(min_W Σ‖(W − T_i)H_i‖, bound)` where the bound is
/// `(1/(n−1)) Σ_{i<j} ‖(T_i − T_j)H‖` when all `H_i` are equal and `None`
/// otherwise. With equal `H` the inner problem is a geometric median of the
/// points `T_i H`; otherwise it is solved by reweighted least squares.
pub fn thm2_lower_bound_check(
    w_a: &DMatrix<f64>,
    hs: &[DVector<f64>],
    passports: &[DVector<f64>],
) -> Result<(f64, Option<f64>)> {
    let n = hs.len();
    if n < 2 || passports.len() != n {
        return Err(Error::Config(format!(
            "need at least two samples with one passport each, got {n} and {}",
            passports.len()
        )));
    }
    if hs.iter().any(|h| h.len() != w_a.ncols()) || passports.iter().any(|s| s.len() != w_a.ncols()) {
        return Err(Error::Dimension("H and passports must match W_a columns".into()));
    }
    let ts: Vec<DMatrix<f64>> = passports.iter().map(|s| top_transform(w_a, s)).collect();

    if hs.iter().all(|h| h == &hs[0]) {
        let h = &hs[0];
        let pts: Vec<DVector<f64>> = ts.iter().map(|t| t * h).collect();
        let med = geometric_median(&pts)?;
        let attack_min = pts.iter().map(|p| (p - &med).norm()).sum();
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += (&pts[i] - &pts[j]).norm();
            }
        }
        return Ok((attack_min, Some(total / (n - 1) as f64)));
    }

    let (rows, cols) = w_a.shape();
    let mut w = ts.iter().fold(DMatrix::zeros(rows, cols), |acc, t| acc + t) / n as f64;
    let mut obj = thm2_objective(&w, &ts, hs);
    let scale = ts.iter().map(|t| t.norm()).fold(0.0, f64::max) * hs.iter().map(|h| h.norm()).fold(0.0, f64::max);
    let floor = 1e-14 * scale.max(1e-300);
    for _ in 0..100_000 {
        if obj == 0.0 {
            return Ok((obj, None));
        }
        let mut a = DMatrix::zeros(cols, cols);
        let mut b = DMatrix::zeros(rows, cols);
        for (t, h) in ts.iter().zip(hs) {
            let r = ((&w - t) * h).norm().max(floor);
            let hh = h * h.transpose() / r;
            b += t * &hh;
            a += hh;
        }
        let tol = 1e-12 * a.norm();
        let a_pinv = a.pseudo_inverse(tol).map_err(|e| Error::Numeric(e.to_string()))?;
        let next = b * a_pinv;
        let next_obj = thm2_objective(&next, &ts, hs);
        if next_obj > obj || obj - next_obj <= 1e-13 * (1.0 + obj) {
            return Ok((obj.min(next_obj), None));
        }
        w = next;
        obj = next_obj;
    }
    Err(Error::Numeric("reweighted least squares did not converge".into()))
}

/// `(1/(n−1)) Σ_{i<j} ‖s_i − s_j‖`
pub fn prop1_bound(passports: &[DVector<f64>]) -> Result<f64> {
    let n = passports.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least two passports, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += (&passports[i] - &passports[j]).norm();
        }
    }
    Ok(total / (n - 1) as f64)
}

/// One row of the theory report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: String,
    pub instances: usize,
    pub violations: usize,
    /// Smallest slack seen; negative means at least one violation.
    pub worst_margin: f64,
}

impl TheoryReport {
    fn new(check: &str) -> Self {
        Self {
            check: check.into(),
            instances: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
        }
    }

    fn record(&mut self, margin: f64) {
        self.instances += 1;
        if !(margin >= 0.0) {
            self.violations += 1;
        }
        self.worst_margin = self.worst_margin.min(margin);
    }
}

/// Runs the lemma and theorem-2 sweeps: `instances` random cases per check,
/// dimensions cycling through 2..=16.
pub fn lemma_suite(instances: usize, seed: u64) -> Result<Vec<TheoryReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut beta = TheoryReport::new("lemma1_beta");
    let mut gamma = TheoryReport::new("lemma1_gamma");
    let mut grad = TheoryReport::new("lemma3_gradient");
    let mut thm2 = TheoryReport::new("thm2_lower_bound");
    for i in 0..instances {
        let m = 2 + i % 15;
        let model = LinearSplitModel::random(m, 1 + i % 4, 10.0, 1.0, &mut rng)?;
        let x = DVector::from_fn(m, |_, _| rng.random::<f64>());
        let guess = passport_vector(m, 10.0, 1.0, &mut rng)?;

        let (l, r) = lemma1_beta_check(&model, &x, &model.s_p_beta, &guess)?;
        beta.record(EQUALITY_TOL - (l - r).abs());

        let (l, r) = lemma1_gamma_check(&model, &x, &model.s_p_gamma, &guess)?;
        gamma.record(l - r + EQUALITY_TOL);

        let target = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let (l, r) = lemma3_gradient_check(&model, &x, &target, &model.s_p_beta, &guess)?;
        grad.record(EQUALITY_TOL - (l - r).abs());

        let n_a = 2 + i % 5;
        let h = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let hs = vec![h; n_a];
        let ps = (0..n_a)
            .map(|_| passport_vector(m, 10.0, 1.0, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (attack_min, bound) = thm2_lower_bound_check(&model.w_a, &hs, &ps)?;
        let bound = bound.expect("equal H gives a bound");
        thm2.record(attack_min - bound + THM2_TOL);
    }
    Ok(vec![beta, gamma, grad, thm2])
}

/// Theorem-1 Monte-Carlo over the given grid; cell `k` uses seed `seed + k`.
pub fn thm1_grid(ms: &[u32], ranges: &[f64], epss: &[f64], trials: u64, seed: u64) -> Result<Vec<Thm1Cell>> {
    let mut cells = Vec::new();
    let mut k = 0;
    for &m in ms {
        for &n in ranges {
            for &e in epss {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k));
                cells.push(thm1_mc_probability(m, n, e, trials, &mut rng)?);
                k += 1;
            }
        }
    }
    Ok(cells)
}

pub fn thm1_report(cells: &[Thm1Cell]) -> TheoryReport {
    let mut r = TheoryReport::new("thm1_monte_carlo");
    for c in cells {
        r.record(c.margin());
    }
    r
}
