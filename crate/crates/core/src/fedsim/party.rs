use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::model::Model;
use crate::numcore::{softmax_xent, Sgd, SgdConfig};
use crate::passport::{Obfuscation, Passport, PassportSampler, RefreshPolicy};

/// How a party drives its passport layer.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PassportMode {
    /// Host layer only.
    #[default]
    Off,
    /// `gamma = 1`, `beta = 0`.
    Passthrough,
    Random {
        mean_range: f64,
        variance: f64,
        #[serde(default)]
        refresh: RefreshPolicy,
    },
}

/// Independent random stream `stream` derived from a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Shuffled minibatches covering `0..n` once.
pub fn batch_order<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// A party's private passport state.
#[derive(Clone, Debug)]
pub struct PartyObfuscation {
    mode: PassportMode,
    sampler: Option<PassportSampler>,
    inference: Option<Passport>,
    ones: Vec<f64>,
    zeros: Vec<f64>,
}

impl PartyObfuscation {
    pub fn new(mode: PassportMode, model: &Model, seed: u64) -> Result<Self> {
        let channels = model.passport_layer().map_or(0, |p| p.out_channels());
        let mut sampler = None;
        let mut inference = None;
        if let PassportMode::Random {
            mean_range,
            variance,
            ..
        } = mode
        {
            let params = model.passport_gen_params(mean_range, variance).ok_or_else(|| {
                Error::Config("random passports requested for a model without a passport layer".into())
            })?;
            let s = PassportSampler::new(params, seed)?;
            inference = Some(s.inference_passport());
            sampler = Some(s);
        }
        Ok(Self {
            mode,
            sampler,
            inference,
            ones: vec![1.0; channels],
            zeros: vec![0.0; channels],
        })
    }

    pub fn mode(&self) -> PassportMode {
        self.mode
    }

    pub fn sampler(&self) -> Option<&PassportSampler> {
        self.sampler.as_ref()
    }

    /// Passports for one training batch of `n` samples, per the refresh policy.
    pub fn draw(&mut self, n: usize) -> Vec<Passport> {
        match (self.mode, self.sampler.as_mut()) {
            (PassportMode::Random { refresh, .. }, Some(s)) => match refresh {
                RefreshPolicy::PerRun => vec![self.inference.clone().expect("set with sampler")],
                RefreshPolicy::PerBatch => vec![s.sample()],
                RefreshPolicy::PerSample => s.sample_n(n),
            },
            _ => Vec::new(),
        }
    }

    /// Obfuscation for a forward pass using passports from [`Self::draw`].
    pub fn training<'a>(&'a self, keys: &'a [Passport]) -> Obfuscation<'a> {
        match self.mode {
            PassportMode::Off => Obfuscation::Plain,
            PassportMode::Passthrough => Obfuscation::Fixed {
                gamma: &self.ones,
                beta: &self.zeros,
            },
            PassportMode::Random { .. } => Obfuscation::Keys(keys),
        }
    }

    /// Obfuscation at inference: the persisted per-run passport.
    pub fn inference(&self) -> Obfuscation<'_> {
        match (&self.mode, &self.inference) {
            (PassportMode::Random { .. }, Some(p)) => Obfuscation::Keys(std::slice::from_ref(p)),
            _ => self.training(&[]),
        }
    }
}

/// Plain minibatch SGD of a single model on `data`; returns per-step losses.
pub fn train_centralized(
    model: &mut Model,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    sgd: SgdConfig,
    shuffle: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    sgd.validate()?;
    let mut opt = Sgd::new(sgd);
    let mut losses = Vec::new();
    for _ in 0..epochs {
        for batch in batch_order(data.len(), batch_size, shuffle) {
            let x = data.features.select_rows(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (logits, cache) = model.forward(&x, Obfuscation::Plain)?;
            let (loss, g) = softmax_xent(&logits, &y)?;
            let grads = model.backward(&cache, &g)?;
            opt.step(&mut model.params_mut(), &grads.params)?;
            losses.push(loss);
        }
    }
    Ok(losses)
}
