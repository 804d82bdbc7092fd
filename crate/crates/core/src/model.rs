//! Sequential models built from plain layers and at most one passport layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{relu, relu_backward, Conv2dLayer, DenseLayer, Tensor};
use crate::passport::{
    HostLayer, Obfuscation, PassportCache, PassportGenParams, PassportGrads, PassportLayer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Relu,
    /// Collapses every axis after the batch axis.
    Flatten,
    Passport(PassportLayer),
}

/// Declarative layer description used in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Flatten,
    PassportDense {
        inputs: usize,
        outputs: usize,
        /// Per-channel passport length.
        passport_len: usize,
    },
    PassportConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        passport_hw: [usize; 2],
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Layer> {
        Ok(match *self {
            LayerSpec::Dense { inputs, outputs } => {
                check_positive(&[inputs, outputs])?;
                Layer::Dense(DenseLayer::init(inputs, outputs, rng))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                check_positive(&[in_channels, out_channels, kernel, stride])?;
                Layer::Conv2d(Conv2dLayer::init(in_channels, out_channels, kernel, stride, padding, rng))
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::PassportDense {
                inputs,
                outputs,
                passport_len,
            } => {
                check_positive(&[inputs, outputs, passport_len])?;
                let host = HostLayer::Dense(DenseLayer::init(inputs, outputs, rng));
                Layer::Passport(PassportLayer::init(host, vec![passport_len], rng)?)
            }
            LayerSpec::PassportConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                passport_hw,
            } => {
                check_positive(&[in_channels, out_channels, kernel, stride, passport_hw[0], passport_hw[1]])?;
                let host = HostLayer::Conv2d(Conv2dLayer::init(
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    rng,
                ));
                Layer::Passport(PassportLayer::init(host, passport_hw.to_vec(), rng)?)
            }
        })
    }
}

fn check_positive(v: &[usize]) -> Result<()> {
    if v.contains(&0) {
        return Err(Error::Config("layer extents must be positive".into()));
    }
    Ok(())
}

/// Whether a parameter belongs to the host network or to a passport
/// autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Host,
    Autoencoder,
}

#[derive(Clone, Debug)]
enum LayerCache {
    Input(Tensor),
    Shape(Vec<usize>),
    Passport(Box<PassportCache>),
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache {
    caches: Vec<LayerCache>,
}

impl ModelCache {
    pub fn passport(&self) -> Option<&PassportCache> {
        self.caches.iter().find_map(|c| match c {
            LayerCache::Passport(p) => Some(p.as_ref()),
            _ => None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    /// Gradients in [`Model::params`] order.
    pub params: Vec<Tensor>,
    pub x: Tensor,
    /// Path-separated gradients of the passport layer, if there is one.
    pub passport: Option<PassportGrads>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        let passports = layers.iter().filter(|l| matches!(l, Layer::Passport(_))).count();
        if passports > 1 {
            return Err(Error::Config(format!(
                "at most one passport layer per model, found {passports}"
            )));
        }
        Ok(Self { layers })
    }

    pub fn from_specs<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs.iter().map(|s| s.build(rng)).collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn passport_layer(&self) -> Option<&PassportLayer> {
        self.layers.iter().find_map(|l| match l {
            Layer::Passport(p) => Some(p),
            _ => None,
        })
    }

    pub fn passport_gen_params(&self, mean_range: f64, variance: f64) -> Option<PassportGenParams> {
        self.passport_layer().map(|p| p.gen_params(mean_range, variance))
    }

    /// The model with the passport layer replaced by its bare host layer:
    /// what an attacker who knows the weights but not the passports sees.
    pub fn host_view(&self) -> Model {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Passport(p) => match &p.host {
                    HostLayer::Dense(d) => Layer::Dense(d.clone()),
                    HostLayer::Conv2d(c) => Layer::Conv2d(c.clone()),
                },
                other => other.clone(),
            })
            .collect();
        Model { layers }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => out.extend([&d.w, &d.b]),
                Layer::Conv2d(c) => out.extend([&c.w, &c.b]),
                Layer::Passport(p) => out.extend(p.params()),
                Layer::Relu | Layer::Flatten => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => out.extend([&mut d.w, &mut d.b]),
                Layer::Conv2d(c) => out.extend([&mut c.w, &mut c.b]),
                Layer::Passport(p) => out.extend(p.params_mut()),
                Layer::Relu | Layer::Flatten => {}
            }
        }
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(_) | Layer::Conv2d(_) => out.extend([ParamKind::Host; 2]),
                Layer::Passport(_) => {
                    out.extend([ParamKind::Host; 2]);
                    out.extend([ParamKind::Autoencoder; 4]);
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn forward(&self, x: &Tensor, obf: Obfuscation<'_>) -> Result<(Tensor, ModelCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let next = match l {
                Layer::Dense(d) => {
                    let y = d.forward(&h)?;
                    caches.push(LayerCache::Input(h));
                    y
                }
                Layer::Conv2d(c) => {
                    let y = c.forward(&h)?;
                    caches.push(LayerCache::Input(h));
                    y
                }
                Layer::Relu => {
                    let y = relu(&h);
                    caches.push(LayerCache::Input(h));
                    y
                }
                Layer::Flatten => {
                    let n = h.shape()[0];
                    let shape = h.shape().to_vec();
                    let rest = h.len() / n;
                    let y = h.reshape(&[n, rest])?;
                    caches.push(LayerCache::Shape(shape));
                    y
                }
                Layer::Passport(p) => {
                    let (y, c) = p.forward(&h, obf)?;
                    caches.push(LayerCache::Passport(Box::new(c)));
                    y
                }
            };
            h = next;
        }
        Ok((h, ModelCache { caches }))
    }

    /// Output only, without keeping a cache.
    pub fn predict(&self, x: &Tensor, obf: Obfuscation<'_>) -> Result<Tensor> {
        Ok(self.forward(x, obf)?.0)
    }

    pub fn backward(&self, cache: &ModelCache, grad_out: &Tensor) -> Result<ModelGrads> {
        if cache.caches.len() != self.layers.len() {
            return Err(Error::Contract("cache does not belong to this model".into()));
        }
        let mut g = grad_out.clone();
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut passport = None;
        for (l, c) in self.layers.iter().zip(&cache.caches).rev() {
            match (l, c) {
                (Layer::Dense(d), LayerCache::Input(x)) => {
                    let gr = d.backward(x, &g)?;
                    per_layer.push(vec![gr.w, gr.b]);
                    g = gr.x;
                }
                (Layer::Conv2d(cv), LayerCache::Input(x)) => {
                    let gr = cv.backward(x, &g)?;
                    per_layer.push(vec![gr.w, gr.b]);
                    g = gr.x;
                }
                (Layer::Relu, LayerCache::Input(x)) => {
                    g = relu_backward(x, &g)?;
                }
                (Layer::Flatten, LayerCache::Shape(s)) => {
                    g = g.reshape(s)?;
                }
                (Layer::Passport(p), LayerCache::Passport(pc)) => {
                    let gr = p.backward(pc, &g)?;
                    g = gr.x.clone();
                    per_layer.push(gr.clone().into_param_grads());
                    passport = Some(gr);
                }
                _ => return Err(Error::Contract("cache does not belong to this model".into())),
            }
        }
        let params = per_layer.into_iter().rev().flatten().collect();
        Ok(ModelGrads {
            params,
            x: g,
            passport,
        })
    }
}

/// Number of output units of a dense-terminated model, if it has one.
pub fn output_dim(model: &Model) -> Result<usize> {
    for l in model.layers().iter().rev() {
        match l {
            Layer::Dense(d) => return Ok(d.out_dim()),
            Layer::Passport(p) => return Ok(p.out_channels()),
            Layer::Conv2d(c) => return Ok(c.out_channels()),
            Layer::Relu | Layer::Flatten => {}
        }
    }
    dim_err("model has no parametric layer")
}
