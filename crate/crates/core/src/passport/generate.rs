use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Minimum gap between two channel means for them to count as distinct.
pub const MEAN_SEPARATION: f64 = 1e-9;
/// Total rejection budget when drawing channel means.
pub const MAX_RESAMPLES: usize = 1000;

/// Generator hyperparameters for one passport layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassportGenParams {
    /// Channel means are drawn from `U(-mean_range, 0)`.
    pub mean_range: f64,
    /// Per-entry Gaussian variance around the channel mean.
    pub variance: f64,
    pub channels: usize,
    pub per_channel_shape: Vec<usize>,
}

impl PassportGenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_range > 0.0) || !self.mean_range.is_finite() {
            return Err(Error::Config(format!(
                "passport mean range must be positive, got {}",
                self.mean_range
            )));
        }
        if !(self.variance >= 0.0) || !self.variance.is_finite() {
            return Err(Error::Config(format!(
                "passport variance must be non-negative, got {}",
                self.variance
            )));
        }
        if self.channels == 0 || self.per_channel_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("passport extents must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.channels];
        s.extend_from_slice(&self.per_channel_shape);
        s
    }

    fn per_channel_len(&self) -> usize {
        self.per_channel_shape.iter().product()
    }
}

/// One passport tensor together with the channel means it was sampled around.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassportKey {
    pub values: Tensor,
    pub means: Vec<f64>,
}

/// The `(s^gamma, s^beta)` pair embedded in a passport layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Passport {
    pub gamma: PassportKey,
    pub beta: PassportKey,
}

/// How often a party draws fresh passport values during a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    PerRun,
    #[default]
    PerBatch,
    PerSample,
}

/// Draws `channels` means uniformly from `(-N, 0)`, rejecting any draw that
/// falls within [`MEAN_SEPARATION`] of an earlier one.
pub fn draw_channel_means<R: Rng + ?Sized>(params: &PassportGenParams, rng: &mut R) -> Result<Vec<f64>> {
    params.validate()?;
    let dist = Uniform::new(-params.mean_range, 0.0)
        .map_err(|e| Error::Generation(format!("bad mean range: {e}")))?;
    let mut means = Vec::with_capacity(params.channels);
    let mut sorted: Vec<f64> = Vec::with_capacity(params.channels);
    let mut rejections = 0usize;
    while means.len() < params.channels {
        let mu: f64 = dist.sample(rng);
        let pos = sorted.partition_point(|&v| v < mu);
        let clash = mu <= -params.mean_range
            || (pos > 0 && mu - sorted[pos - 1] <= MEAN_SEPARATION)
            || (pos < sorted.len() && sorted[pos] - mu <= MEAN_SEPARATION);
        if clash {
            rejections += 1;
            if rejections > MAX_RESAMPLES {
                return Err(Error::Generation(format!(
                    "could not draw {} distinct means in (-{}, 0) within {MAX_RESAMPLES} resamples",
                    params.channels, params.mean_range
                )));
            }
            continue;
        }
        sorted.insert(pos, mu);
        means.push(mu);
    }
    Ok(means)
}

/// Samples passport values `~ Normal(mu_j, variance)` for each channel `j`.
pub fn sample_key<R: Rng + ?Sized>(params: &PassportGenParams, means: &[f64], rng: &mut R) -> PassportKey {
    let sigma = params.variance.sqrt();
    let per = params.per_channel_len();
    let mut data = Vec::with_capacity(means.len() * per);
    for &mu in means {
        for _ in 0..per {
            let z: f64 = StandardNormal.sample(rng);
            data.push(mu + sigma * z);
        }
    }
    PassportKey {
        values: Tensor::new(params.shape(), data).expect("passport shape matches data"),
        means: means.to_vec(),
    }
}

/// Draws fresh channel means and values for both `s^gamma` and `s^beta`.
pub fn generate_passport<R: Rng + ?Sized>(params: &PassportGenParams, rng: &mut R) -> Result<Passport> {
    let gm = draw_channel_means(params, rng)?;
    let bm = draw_channel_means(params, rng)?;
    let gamma = sample_key(params, &gm, rng);
    let beta = sample_key(params, &bm, rng);
    Ok(Passport { gamma, beta })
}

/// Enough to rebuild a party's passport stream after a restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassportSidecar {
    pub seed: u64,
    pub params: PassportGenParams,
}

/// A party's private passport source. Channel means are fixed when the
/// sampler is created; each [`PassportSampler::sample`] redraws the Gaussian
/// values around them.
#[derive(Clone, Debug)]
pub struct PassportSampler {
    seed: u64,
    params: PassportGenParams,
    gamma_means: Vec<f64>,
    beta_means: Vec<f64>,
    rng: ChaCha8Rng,
}

impl PassportSampler {
    pub fn new(params: PassportGenParams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma_means = draw_channel_means(&params, &mut rng)?;
        let beta_means = draw_channel_means(&params, &mut rng)?;
        Ok(Self {
            seed,
            params,
            gamma_means,
            beta_means,
            rng,
        })
    }

    pub fn from_sidecar(sidecar: &PassportSidecar) -> Result<Self> {
        Self::new(sidecar.params.clone(), sidecar.seed)
    }

    pub fn sidecar(&self) -> PassportSidecar {
        PassportSidecar {
            seed: self.seed,
            params: self.params.clone(),
        }
    }

    pub fn params(&self) -> &PassportGenParams {
        &self.params
    }

    pub fn sample(&mut self) -> Passport {
        Passport {
            gamma: sample_key(&self.params, &self.gamma_means, &mut self.rng),
            beta: sample_key(&self.params, &self.beta_means, &mut self.rng),
        }
    }

    pub fn sample_n(&mut self, n: usize) -> Vec<Passport> {
        (0..n).map(|_| self.sample()).collect()
    }

    /// The passport used at inference: first draw of a stream re-seeded from
    /// the persisted party seed, so it is stable across calls and restarts.
    pub fn inference_passport(&self) -> Passport {
        let mut fresh = Self::new(self.params.clone(), self.seed)
            .expect("params were validated at construction");
        fresh.sample()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: f64, var: f64, c: usize, per: &[usize]) -> PassportGenParams {
        PassportGenParams {
            mean_range: n,
            variance: var,
            channels: c,
            per_channel_shape: per.to_vec(),
        }
    }

    #[test]
    fn zero_variance_collapses_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = generate_passport(&params(10.0, 0.0, 1, &[5]), &mut rng).unwrap();
        let mu = p.gamma.means[0];
        assert!(mu > -10.0 && mu < 0.0);
        assert!(p.gamma.values.data().iter().all(|&v| v == mu));
    }

    #[test]
    fn per_channel_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let p = generate_passport(&params(50.0, 1.0, 16, &[n]), &mut rng).unwrap();
        for (j, &mu) in p.gamma.means.iter().enumerate() {
            let slice = &p.gamma.values.data()[j * n..(j + 1) * n];
            let mean: f64 = slice.iter().sum::<f64>() / n as f64;
            assert!((mean - mu).abs() <= 3.0 / (n as f64).sqrt(), "channel {j}");
        }
        let mut sorted = p.gamma.means.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted.windows(2).all(|w| w[1] - w[0] > MEAN_SEPARATION));
    }

    #[test]
    fn same_seed_same_passport() {
        let pp = params(5.0, 2.0, 3, &[4]);
        let a = generate_passport(&pp, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_passport(&pp, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let mut s1 = PassportSampler::new(pp.clone(), 11).unwrap();
        let mut s2 = PassportSampler::from_sidecar(&s1.sidecar()).unwrap();
        assert_eq!(s1.sample_n(3), s2.sample_n(3));
        assert_eq!(s1.inference_passport(), s2.inference_passport());
    }

    #[test]
    fn sidecar_json_roundtrip() {
        let s = PassportSampler::new(params(2.0, 0.5, 2, &[3]), 99).unwrap();
        let text = serde_json::to_string(&s.sidecar()).unwrap();
        let back: PassportSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s.sidecar());
        assert!(!text.contains("values"));
    }

    #[test]
    fn impossible_distinctness_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = draw_channel_means(&params(1e-12, 1.0, 64, &[1]), &mut rng);
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(generate_passport(&params(0.0, 1.0, 1, &[1]), &mut rng).is_err());
        assert!(generate_passport(&params(1.0, -1.0, 1, &[1]), &mut rng).is_err());
    }
}
