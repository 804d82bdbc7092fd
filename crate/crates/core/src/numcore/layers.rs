//! Dense and convolutional layers with hand-derived backward passes, plus
//! the activations and losses the model zoo needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Fully connected layer `y = W x + b` with `W` stored `[out × in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub w: Tensor,
    pub b: Tensor,
    pub x: Tensor,
}

impl DenseLayer {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.ndim() != 2 || b.ndim() != 1 || w.shape()[0] != b.len() {
            return dim_err(format!(
                "dense weights {:?} incompatible with bias {:?}",
                w.shape(),
                b.shape()
            ));
        }
        Ok(Self { w, b })
    }

    /// PyTorch-style default init: `U(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: Tensor::uniform(&[out_dim, in_dim], -bound, bound, rng),
            b: Tensor::uniform(&[out_dim], -bound, bound, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// `W x` for every row of `x`, without the bias.
    pub fn apply_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        if x.last_dim() != inp {
            return dim_err(format!(
                "dense layer expects trailing dim {inp}, got {:?}",
                x.shape()
            ));
        }
        let rows = x.rows();
        let w = self.w.data();
        let mut y = Vec::with_capacity(rows * out);
        for r in 0..rows {
            let xr = x.row(r);
            for o in 0..out {
                let wr = &w[o * inp..(o + 1) * inp];
                y.push(wr.iter().zip(xr).map(|(a, b)| a * b).sum());
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        Tensor::new(shape, y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.apply_weights(x)?;
        let out = self.out_dim();
        let b = self.b.data();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[i % out];
        }
        Ok(y)
    }

    /// Gradients of a scalar loss given `dL/dy`; batch contributions are summed.
    pub fn backward(&self, x: &Tensor, grad_y: &Tensor) -> Result<DenseGrads> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        if x.last_dim() != inp || grad_y.last_dim() != out || x.rows() != grad_y.rows() {
            return dim_err(format!(
                "dense backward: x {:?}, grad_y {:?}, layer [{out} x {inp}]",
                x.shape(),
                grad_y.shape()
            ));
        }
        let w = self.w.data();
        let mut gw = vec![0.0; out * inp];
        let mut gb = vec![0.0; out];
        let mut gx = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let xr = x.row(r);
            let gyr = grad_y.row(r);
            let gxr = &mut gx[r * inp..(r + 1) * inp];
            for o in 0..out {
                let g = gyr[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let gwr = &mut gw[o * inp..(o + 1) * inp];
                let wr = &w[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    gwr[i] += g * xr[i];
                    gxr[i] += g * wr[i];
                }
            }
        }
        Ok(DenseGrads {
            w: Tensor::new(vec![out, inp], gw)?,
            b: Tensor::new(vec![out], gb)?,
            x: Tensor::new(x.shape().to_vec(), gx)?,
        })
    }
}

/// 2-D convolution over `[batch × in_channels × h × w]` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub w: Tensor,
    pub b: Tensor,
    pub x: Tensor,
}

impl Conv2dLayer {
    pub fn new(w: Tensor, b: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if w.ndim() != 4 || b.ndim() != 1 || w.shape()[0] != b.len() {
            return dim_err(format!(
                "conv weights {:?} incompatible with bias {:?}",
                w.shape(),
                b.shape()
            ));
        }
        if stride == 0 {
            return Err(Error::Argument("conv stride must be >= 1".into()));
        }
        Ok(Self {
            w,
            b,
            stride,
            padding,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            w: Tensor::uniform(&[out_channels, in_channels, kernel, kernel], -bound, bound, rng),
            b: Tensor::uniform(&[out_channels], -bound, bound, rng),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = (self.w.shape()[2], self.w.shape()[3]);
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return dim_err(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        if x.ndim() != 4 || x.shape()[1] != self.in_channels() {
            return dim_err(format!(
                "conv expects [n x {} x h x w], got {:?}",
                self.in_channels(),
                x.shape()
            ));
        }
        Ok((x.shape()[0], x.shape()[2], x.shape()[3]))
    }

    /// Convolution without the bias term.
    pub fn apply_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check_input(x)?;
        let (oc, ic, kh, kw) = (
            self.out_channels(),
            self.in_channels(),
            self.w.shape()[2],
            self.w.shape()[3],
        );
        let (oh, ow) = self.output_hw(h, w)?;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let xd = x.data();
        let wd = self.w.data();
        let mut y = vec![0.0; n * oc * oh * ow];
        for b in 0..n {
            for o in 0..oc {
                for yi in 0..oh {
                    for xi in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ic {
                            for ki in 0..kh {
                                let ii = yi as isize * s + ki as isize - p;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let jj = xi as isize * s + kj as isize - p;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    acc += wd[((o * ic + c) * kh + ki) * kw + kj]
                                        * xd[((b * ic + c) * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                        y[((b * oc + o) * oh + yi) * ow + xi] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, oc, oh, ow], y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.apply_weights(x)?;
        let oc = self.out_channels();
        let plane = y.shape()[2] * y.shape()[3];
        let b = self.b.data();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[(i / plane) % oc];
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, grad_y: &Tensor) -> Result<Conv2dGrads> {
        let (n, h, w) = self.check_input(x)?;
        let (oc, ic, kh, kw) = (
            self.out_channels(),
            self.in_channels(),
            self.w.shape()[2],
            self.w.shape()[3],
        );
        let (oh, ow) = self.output_hw(h, w)?;
        if grad_y.shape() != [n, oc, oh, ow] {
            return dim_err(format!(
                "conv backward expects grad {:?}, got {:?}",
                [n, oc, oh, ow],
                grad_y.shape()
            ));
        }
        let (s, p) = (self.stride as isize, self.padding as isize);
        let xd = x.data();
        let wd = self.w.data();
        let gy = grad_y.data();
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; oc];
        let mut gx = vec![0.0; x.len()];
        for b in 0..n {
            for o in 0..oc {
                for yi in 0..oh {
                    for xi in 0..ow {
                        let g = gy[((b * oc + o) * oh + yi) * ow + xi];
                        if g == 0.0 {
                            continue;
                        }
                        gb[o] += g;
                        for c in 0..ic {
                            for ki in 0..kh {
                                let ii = yi as isize * s + ki as isize - p;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let jj = xi as isize * s + kj as isize - p;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let xo = ((b * ic + c) * h + ii as usize) * w + jj as usize;
                                    let wo = ((o * ic + c) * kh + ki) * kw + kj;
                                    gw[wo] += g * xd[xo];
                                    gx[xo] += g * wd[wo];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Conv2dGrads {
            w: Tensor::new(self.w.shape().to_vec(), gw)?,
            b: Tensor::new(vec![oc], gb)?,
            x: Tensor::new(x.shape().to_vec(), gx)?,
        })
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_y, |xv, g| if xv > 0.0 { g } else { 0.0 })
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, grad_y: &Tensor, slope: f64) -> Result<Tensor> {
    x.zip_map(grad_y, |xv, g| if xv > 0.0 { g } else { slope * g })
}

/// Row-wise softmax of a `[batch × classes]` (or `[classes]`) tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.last_dim();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let c = logits.last_dim();
    if logits.rows() != labels.len() {
        return dim_err(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} out of range [0, {c})")));
    }
    let n = labels.len() as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[r * c..(r + 1) * c];
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((loss, grad))
}

/// Cross-entropy against soft targets `p` (rows sum to one); returns the mean
/// loss, the gradient w.r.t. the logits, and the gradient w.r.t. `p`.
pub fn softmax_xent_soft(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    logits.check_same_shape(targets)?;
    let c = logits.last_dim();
    let n = logits.rows() as f64;
    let q = softmax(logits);
    let mut loss = 0.0;
    let mut g_logits = vec![0.0; logits.len()];
    let mut g_targets = vec![0.0; logits.len()];
    for r in 0..logits.rows() {
        let qr = q.row(r);
        let pr = targets.row(r);
        let psum: f64 = pr.iter().sum();
        for k in 0..c {
            let lq = qr[k].max(f64::MIN_POSITIVE).ln();
            loss -= pr[k] * lq;
            g_targets[r * c + k] = -lq / n;
            g_logits[r * c + k] = (psum * qr[k] - pr[k]) / n;
        }
    }
    Ok((
        loss / n,
        Tensor::new(logits.shape().to_vec(), g_logits)?,
        Tensor::new(logits.shape().to_vec(), g_targets)?,
    ))
}

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let loss = diff.sq_norm() / n;
    if !loss.is_finite() {
        return Err(Error::Numeric("mse is not finite".into()));
    }
    Ok((loss, diff.scale(2.0 / n)))
}
