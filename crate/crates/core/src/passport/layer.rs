//! The adaptive obfuscation layer `g_W(x, s) = gamma * (W x + b) + beta`,
//! where `gamma = Avg(D(E(W s^gamma)))` and `beta = Avg(D(E(W s^beta)))`.
//!
//! `W` receives gradient along three routes: directly through `W x`
//! (theta path) and through the passport transforms that produce `gamma` and
//! `beta`. [`PassportGrads`] keeps the three contributions separate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::{Passport, PassportGenParams};
use crate::error::{dim_err, Error, Result};
use crate::numcore::{
    leaky_relu, leaky_relu_backward, Conv2dLayer, DenseLayer, Tensor,
};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Per-channel mean over every non-channel position of `t`.
pub fn avg_pool_to_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    if channels == 0 || t.len() % channels != 0 {
        return dim_err(format!(
            "{} values cannot be split into {channels} channels",
            t.len()
        ));
    }
    let rest = t.len() / channels;
    let data = t
        .data()
        .chunks(rest)
        .map(|c| c.iter().sum::<f64>() / rest as f64)
        .collect();
    Tensor::new(vec![channels], data)
}

/// The layer a passport is embedded into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostLayer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
}

impl HostLayer {
    pub fn out_channels(&self) -> usize {
        match self {
            HostLayer::Dense(d) => d.out_dim(),
            HostLayer::Conv2d(c) => c.out_channels(),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            HostLayer::Dense(d) => d.in_dim(),
            HostLayer::Conv2d(c) => c.in_channels(),
        }
    }

    pub fn w(&self) -> &Tensor {
        match self {
            HostLayer::Dense(d) => &d.w,
            HostLayer::Conv2d(c) => &c.w,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            HostLayer::Dense(d) => d.forward(x),
            HostLayer::Conv2d(c) => c.forward(x),
        }
    }

    /// `(grad_w, grad_b, grad_x)`
    pub fn backward(&self, x: &Tensor, grad_y: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        match self {
            HostLayer::Dense(d) => {
                let g = d.backward(x, grad_y)?;
                Ok((g.w, g.b, g.x))
            }
            HostLayer::Conv2d(c) => {
                let g = c.backward(x, grad_y)?;
                Ok((g.w, g.b, g.x))
            }
        }
    }

    /// Applies `W` (no bias) to a passport and returns it channel-major as
    /// `[out_channels × positions]`.
    fn apply_to_passport(&self, s: &Tensor) -> Result<Tensor> {
        match self {
            HostLayer::Dense(d) => {
                let (c, h) = passport_dense_dims(s, d.in_dim())?;
                let st = transpose(s.data(), c, h);
                let z = d.apply_weights(&Tensor::new(vec![h, c], st)?)?;
                let out = d.out_dim();
                Tensor::new(vec![out, h], transpose(z.data(), h, out))
            }
            HostLayer::Conv2d(cv) => {
                let img = passport_as_image(s, cv.in_channels())?;
                let z = cv.apply_weights(&img)?;
                let oc = cv.out_channels();
                let rest = z.len() / oc;
                z.reshape(&[oc, rest])
            }
        }
    }

    /// Gradient of `<grad_z, W s>` w.r.t. `W`, with `grad_z` shaped like the
    /// output of `apply_to_passport`.
    fn passport_weight_grad(&self, s: &Tensor, grad_z: &Tensor) -> Result<Tensor> {
        match self {
            HostLayer::Dense(d) => {
                let (c, h) = passport_dense_dims(s, d.in_dim())?;
                let out = d.out_dim();
                let st = Tensor::new(vec![h, c], transpose(s.data(), c, h))?;
                let gz = Tensor::new(vec![h, out], transpose(grad_z.data(), out, h))?;
                Ok(d.backward(&st, &gz)?.w)
            }
            HostLayer::Conv2d(cv) => {
                let img = passport_as_image(s, cv.in_channels())?;
                let (oh, ow) = cv.output_hw(img.shape()[2], img.shape()[3])?;
                let gz = grad_z.clone().reshape(&[1, cv.out_channels(), oh, ow])?;
                Ok(cv.backward(&img, &gz)?.w)
            }
        }
    }

    /// Number of positions per output channel after `W` is applied to a
    /// passport of the given per-channel shape.
    pub fn passport_positions(&self, per_channel_shape: &[usize]) -> Result<usize> {
        match self {
            HostLayer::Dense(_) => match per_channel_shape {
                [h] => Ok(*h),
                _ => dim_err("dense passports have one per-channel axis"),
            },
            HostLayer::Conv2d(c) => match per_channel_shape {
                [h, w] => {
                    let (oh, ow) = c.output_hw(*h, *w)?;
                    Ok(oh * ow)
                }
                _ => dim_err("conv passports have two per-channel axes"),
            },
        }
    }
}

fn passport_dense_dims(s: &Tensor, in_dim: usize) -> Result<(usize, usize)> {
    match s.shape() {
        [c, h] if *c == in_dim => Ok((*c, *h)),
        other => dim_err(format!("dense passport must be [{in_dim} x h], got {other:?}")),
    }
}

fn passport_as_image(s: &Tensor, in_channels: usize) -> Result<Tensor> {
    match s.shape() {
        [c, h, w] if *c == in_channels => s.clone().reshape(&[1, *c, *h, *w]),
        other => dim_err(format!(
            "conv passport must be [{in_channels} x h x w], got {other:?}"
        )),
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Single-hidden-layer autoencoder `D(leaky(E z))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub enc: DenseLayer,
    pub dec: DenseLayer,
}

impl Autoencoder {
    pub fn hidden_dim(flat_dim: usize) -> usize {
        4.max(flat_dim.div_ceil(4))
    }

    /// Weights are uniform in `±1/sqrt(fan_in)`; the decoder bias starts at
    /// one so `gamma` starts near one for small passports.
    pub fn init<R: Rng + ?Sized>(flat_dim: usize, rng: &mut R) -> Self {
        let h = Self::hidden_dim(flat_dim);
        let enc = DenseLayer::init(flat_dim, h, rng);
        let mut dec = DenseLayer::init(h, flat_dim, rng);
        dec.b = Tensor::full(&[flat_dim], 1.0);
        Self { enc, dec }
    }

    pub fn flat_dim(&self) -> usize {
        self.enc.in_dim()
    }
}

/// Where `gamma` and `beta` come from for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Obfuscation<'a> {
    /// Derive `gamma`/`beta` from passports. One passport is shared by the
    /// whole batch; otherwise one per sample.
    Keys(&'a [Passport]),
    /// Use the given per-channel values as constants.
    Fixed { gamma: &'a [f64], beta: &'a [f64] },
    /// Host layer only (`gamma = 1`, `beta = 0`).
    Plain,
}

#[derive(Clone, Debug)]
struct TransformCache {
    s: Tensor,
    z: Tensor,
    e_pre: Tensor,
    e_act: Tensor,
    positions: usize,
}

#[derive(Clone, Debug)]
struct GroupCache {
    gamma: TransformCache,
    beta: TransformCache,
}

/// Intermediates from [`PassportLayer::forward`] needed by the backward pass.
#[derive(Clone, Debug)]
pub struct PassportCache {
    generation: u64,
    x: Tensor,
    v: Tensor,
    gammas: Vec<Vec<f64>>,
    betas: Vec<Vec<f64>>,
    groups: Vec<GroupCache>,
}

impl PassportCache {
    /// Per-group `gamma` vectors (one group when a passport is shared).
    pub fn gammas(&self) -> &[Vec<f64>] {
        &self.gammas
    }

    pub fn betas(&self) -> &[Vec<f64>] {
        &self.betas
    }
}

/// Gradients of a passport layer, with the host-weight gradient split by path.
#[derive(Clone, Debug)]
pub struct PassportGrads {
    pub host_w_theta: Tensor,
    pub host_w_gamma: Tensor,
    pub host_w_beta: Tensor,
    pub host_b: Tensor,
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub x: Tensor,
}

impl PassportGrads {
    /// Total host-weight gradient: theta + gamma + beta paths.
    pub fn host_w(&self) -> Tensor {
        let mut g = self.host_w_theta.clone();
        g.add_assign(&self.host_w_gamma).expect("same shape");
        g.add_assign(&self.host_w_beta).expect("same shape");
        g
    }

    /// Parameter gradients in [`PassportLayer::params`] order.
    pub fn into_param_grads(self) -> Vec<Tensor> {
        let w = self.host_w();
        vec![w, self.host_b, self.enc_w, self.enc_b, self.dec_w, self.dec_b]
    }
}

/// A host layer with an embedded passport transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassportLayer {
    pub host: HostLayer,
    pub ae: Autoencoder,
    /// Per-channel shape of the passports this layer accepts.
    pub per_channel_shape: Vec<usize>,
    #[serde(skip)]
    generation: u64,
}

impl PassportLayer {
    pub fn new(host: HostLayer, ae: Autoencoder, per_channel_shape: Vec<usize>) -> Result<Self> {
        let flat = host.out_channels() * host.passport_positions(&per_channel_shape)?;
        if ae.flat_dim() != flat || ae.dec.out_dim() != flat || ae.enc.out_dim() != ae.dec.in_dim() {
            return dim_err(format!(
                "autoencoder {}->{}->{} does not match passport transform size {flat}",
                ae.enc.in_dim(),
                ae.enc.out_dim(),
                ae.dec.out_dim()
            ));
        }
        Ok(Self {
            host,
            ae,
            per_channel_shape,
            generation: 0,
        })
    }

    pub fn init<R: Rng + ?Sized>(host: HostLayer, per_channel_shape: Vec<usize>, rng: &mut R) -> Result<Self> {
        let flat = host.out_channels() * host.passport_positions(&per_channel_shape)?;
        let ae = Autoencoder::init(flat, rng);
        Self::new(host, ae, per_channel_shape)
    }

    /// Generator parameters matching this layer's passport shape.
    pub fn gen_params(&self, mean_range: f64, variance: f64) -> PassportGenParams {
        PassportGenParams {
            mean_range,
            variance,
            channels: self.host.in_channels(),
            per_channel_shape: self.per_channel_shape.clone(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.host.out_channels()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let (w, b) = match &self.host {
            HostLayer::Dense(d) => (&d.w, &d.b),
            HostLayer::Conv2d(c) => (&c.w, &c.b),
        };
        vec![w, b, &self.ae.enc.w, &self.ae.enc.b, &self.ae.dec.w, &self.ae.dec.b]
    }

    /// Mutable parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation += 1;
        let (w, b) = match &mut self.host {
            HostLayer::Dense(d) => (&mut d.w, &mut d.b),
            HostLayer::Conv2d(c) => (&mut c.w, &mut c.b),
        };
        vec![
            w,
            b,
            &mut self.ae.enc.w,
            &mut self.ae.enc.b,
            &mut self.ae.dec.w,
            &mut self.ae.dec.b,
        ]
    }

    fn transform(&self, s: &Tensor) -> Result<(Vec<f64>, TransformCache)> {
        let expected = {
            let mut e = vec![self.host.in_channels()];
            e.extend_from_slice(&self.per_channel_shape);
            e
        };
        if s.shape() != expected.as_slice() {
            return dim_err(format!(
                "passport shape {:?} does not match layer {:?}",
                s.shape(),
                expected
            ));
        }
        let z2 = self.host.apply_to_passport(s)?;
        let positions = z2.shape()[1];
        let z = z2.reshape(&[self.ae.flat_dim()])?;
        let e_pre = self.ae.enc.forward(&z)?;
        let e_act = leaky_relu(&e_pre, LEAKY_SLOPE);
        let d = self.ae.dec.forward(&e_act)?;
        let pooled = avg_pool_to_channels(&d, self.out_channels())?;
        Ok((
            pooled.into_data(),
            TransformCache {
                s: s.clone(),
                z,
                e_pre,
                e_act,
                positions,
            },
        ))
    }

    /// `gamma` and `beta` for a single passport.
    pub fn gamma_beta(&self, passport: &Passport) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            self.transform(&passport.gamma.values)?.0,
            self.transform(&passport.beta.values)?.0,
        ))
    }

    /// Per-channel `Avg(W s)` without the autoencoder: the value an observer
    /// who knows the host weights but not the autoencoder can compute.
    pub fn host_projection(&self, s: &Tensor) -> Result<Vec<f64>> {
        let z = self.host.apply_to_passport(s)?;
        Ok(avg_pool_to_channels(&z, self.out_channels())?.into_data())
    }

    pub fn forward(&self, x: &Tensor, obf: Obfuscation<'_>) -> Result<(Tensor, PassportCache)> {
        let v = self.host.forward(x)?;
        let n = v.shape()[0];
        let oc = self.out_channels();
        let per_sample = v.len() / n;
        let plane = per_sample / oc;

        let (gammas, betas, groups) = match obf {
            Obfuscation::Plain => (vec![vec![1.0; oc]], vec![vec![0.0; oc]], Vec::new()),
            Obfuscation::Fixed { gamma, beta } => {
                if gamma.len() != oc || beta.len() != oc {
                    return dim_err(format!(
                        "fixed gamma/beta must have {oc} entries, got {}/{}",
                        gamma.len(),
                        beta.len()
                    ));
                }
                (vec![gamma.to_vec()], vec![beta.to_vec()], Vec::new())
            }
            Obfuscation::Keys(ps) => {
                if ps.len() != 1 && ps.len() != n {
                    return dim_err(format!(
                        "need one shared passport or one per sample ({n}), got {}",
                        ps.len()
                    ));
                }
                let mut gammas = Vec::with_capacity(ps.len());
                let mut betas = Vec::with_capacity(ps.len());
                let mut groups = Vec::with_capacity(ps.len());
                for p in ps {
                    let (g, gc) = self.transform(&p.gamma.values)?;
                    let (b, bc) = self.transform(&p.beta.values)?;
                    gammas.push(g);
                    betas.push(b);
                    groups.push(GroupCache { gamma: gc, beta: bc });
                }
                (gammas, betas, groups)
            }
        };

        let mut y = v.clone();
        let shared = gammas.len() == 1;
        for (i, val) in y.data_mut().iter_mut().enumerate() {
            let sample = i / per_sample;
            let ch = (i % per_sample) / plane;
            let g = if shared { 0 } else { sample };
            *val = gammas[g][ch] * *val + betas[g][ch];
        }
        y.ensure_finite("passport layer output")?;
        Ok((
            y,
            PassportCache {
                generation: self.generation,
                x: x.clone(),
                v,
                gammas,
                betas,
                groups,
            },
        ))
    }

    fn transform_backward(
        &self,
        cache: &TransformCache,
        grad_pooled: &[f64],
        grads: &mut PassportGrads,
        path_w: PathSlot,
    ) -> Result<()> {
        let flat = self.ae.flat_dim();
        let pos = cache.positions;
        let gd: Vec<f64> = (0..flat).map(|i| grad_pooled[i / pos] / pos as f64).collect();
        let gd = Tensor::new(vec![flat], gd)?;
        let dec = self.ae.dec.backward(&cache.e_act, &gd)?;
        grads.dec_w.add_assign(&dec.w)?;
        grads.dec_b.add_assign(&dec.b)?;
        let g_pre = leaky_relu_backward(&cache.e_pre, &dec.x, LEAKY_SLOPE)?;
        let enc = self.ae.enc.backward(&cache.z, &g_pre)?;
        grads.enc_w.add_assign(&enc.w)?;
        grads.enc_b.add_assign(&enc.b)?;
        let gz = enc.x.reshape(&[self.out_channels(), pos])?;
        let gw = self.host.passport_weight_grad(&cache.s, &gz)?;
        match path_w {
            PathSlot::Gamma => grads.host_w_gamma.add_assign(&gw)?,
            PathSlot::Beta => grads.host_w_beta.add_assign(&gw)?,
        }
        Ok(())
    }

    pub fn backward(&self, cache: &PassportCache, grad_y: &Tensor) -> Result<PassportGrads> {
        if cache.generation != self.generation {
            return Err(Error::Contract(format!(
                "passport cache from generation {} used after parameters changed (now {})",
                cache.generation, self.generation
            )));
        }
        cache.v.check_same_shape(grad_y)?;
        let n = cache.v.shape()[0];
        let oc = self.out_channels();
        let per_sample = cache.v.len() / n;
        let plane = per_sample / oc;
        let shared = cache.gammas.len() == 1;
        let groups = cache.gammas.len();

        let mut grad_v = grad_y.clone();
        let mut g_gamma = vec![vec![0.0; oc]; groups];
        let mut g_beta = vec![vec![0.0; oc]; groups];
        for (i, gv) in grad_v.data_mut().iter_mut().enumerate() {
            let sample = i / per_sample;
            let ch = (i % per_sample) / plane;
            let g = if shared { 0 } else { sample };
            let gy = *gv;
            g_gamma[g][ch] += gy * cache.v.data()[i];
            g_beta[g][ch] += gy;
            *gv = gy * cache.gammas[g][ch];
        }
        let (host_w_theta, host_b, x) = self.host.backward(&cache.x, &grad_v)?;

        let mut grads = PassportGrads {
            host_w_gamma: Tensor::zeros_like(&host_w_theta),
            host_w_beta: Tensor::zeros_like(&host_w_theta),
            host_w_theta,
            host_b,
            enc_w: Tensor::zeros_like(&self.ae.enc.w),
            enc_b: Tensor::zeros_like(&self.ae.enc.b),
            dec_w: Tensor::zeros_like(&self.ae.dec.w),
            dec_b: Tensor::zeros_like(&self.ae.dec.b),
            x,
        };
        for (g, group) in cache.groups.iter().enumerate() {
            self.transform_backward(&group.gamma, &g_gamma[g], &mut grads, PathSlot::Gamma)?;
            self.transform_backward(&group.beta, &g_beta[g], &mut grads, PathSlot::Beta)?;
        }
        Ok(grads)
    }
}

#[derive(Clone, Copy)]
enum PathSlot {
    Gamma,
    Beta,
}
