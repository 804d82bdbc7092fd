//! Horizontal federation: private passported bottoms, a server-averaged top.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::messages::{FedMessage, MessageLog, MetricRecord};
use super::party::{batch_order, stream_rng, PartyObfuscation, PassportMode};
use crate::defenses::{DefenseConfig, DefenseKind, DefenseTarget};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::metrics::accuracy;
use crate::model::{LayerSpec, Model};
use crate::numcore::{softmax_xent, Sgd, SgdConfig, Tensor};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 100;
const PASSPORT_STREAM: u64 = 200;
const DEFENSE_STREAM: u64 = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HflConfig {
    pub clients: usize,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    pub bottom: Vec<LayerSpec>,
    pub top: Vec<LayerSpec>,
    #[serde(default)]
    pub passport: PassportMode,
    #[serde(default)]
    pub defense: DefenseConfig,
    /// Overridden per point when the config is part of an experiment.
    #[serde(default)]
    pub seed: u64,
    /// Keep every exchanged message for auditing.
    #[serde(default)]
    pub keep_messages: bool,
}

fn one() -> usize {
    1
}

impl HflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::Config("batch size and local epochs must be positive".into()));
        }
        self.sgd.validate()?;
        self.defense.validate()
    }

    /// Server-initialised top and the per-client bottoms, as the run builds them.
    pub fn initial_models(&self) -> Result<(Model, Vec<Model>)> {
        let mut init = stream_rng(self.seed, INIT_STREAM);
        let top = Model::from_specs(&self.top, &mut init)?;
        let bottoms = (0..self.clients)
            .map(|_| Model::from_specs(&self.bottom, &mut init))
            .collect::<Result<Vec<_>>>()?;
        Ok((top, bottoms))
    }
}

/// One client: private bottom `theta_k` with its passports, local copy of
/// the shared top `omega_k`, and local data.
#[derive(Clone, Debug)]
pub struct HflClient {
    pub id: usize,
    pub bottom: Model,
    pub top: Model,
    pub data: Dataset,
    pub obfuscation: PartyObfuscation,
    shuffle: ChaCha8Rng,
    noise: ChaCha8Rng,
    opt_bottom: Sgd,
    opt_top: Sgd,
}

impl HflClient {
    pub fn new(
        id: usize,
        bottom: Model,
        top: Model,
        data: Dataset,
        mode: PassportMode,
        sgd: SgdConfig,
        seed: u64,
    ) -> Result<Self> {
        let passport_seed = stream_rng(seed, PASSPORT_STREAM + id as u64).random();
        let obfuscation = PartyObfuscation::new(mode, &bottom, passport_seed)?;
        Ok(Self {
            id,
            bottom,
            top,
            data,
            obfuscation,
            shuffle: Self::shuffle_rng(seed, id),
            noise: stream_rng(seed, DEFENSE_STREAM + id as u64),
            opt_bottom: Sgd::new(sgd),
            opt_top: Sgd::new(sgd),
        })
    }

    /// The batch-order stream client `id` uses under run seed `seed`.
    pub fn shuffle_rng(seed: u64, id: usize) -> ChaCha8Rng {
        stream_rng(seed, SHUFFLE_STREAM + id as u64)
    }

    /// `(loss, accuracy)` on `data` with inference passports.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let h = self.bottom.predict(&data.features, self.obfuscation.inference())?;
        let logits = self.top.predict(&h, crate::passport::Obfuscation::Plain)?;
        let (loss, _) = softmax_xent(&logits, &data.labels)?;
        Ok((loss, accuracy(&logits, &data.labels)?))
    }
}

fn set_params(model: &mut Model, values: &[Tensor]) -> Result<()> {
    let mut ps = model.params_mut();
    if ps.len() != values.len() {
        return Err(Error::Dimension(format!(
            "{} shared tensors for {} parameters",
            values.len(),
            ps.len()
        )));
    }
    for (p, v) in ps.iter_mut().zip(values) {
        p.check_same_shape(v)?;
        **p = v.clone();
    }
    Ok(())
}

/// Loads `shared` into the client's top, then runs `epochs` local epochs.
/// Returns the per-step training losses.
pub fn hfl_local_epoch(client: &mut HflClient, shared: &[Tensor], batch_size: usize, epochs: usize) -> Result<Vec<f64>> {
    if client.data.is_empty() {
        return Err(Error::Config(format!("client {} has no data", client.id)));
    }
    set_params(&mut client.top, shared)?;
    let mut losses = Vec::new();
    for _ in 0..epochs {
        for batch in batch_order(client.data.len(), batch_size, &mut client.shuffle) {
            let x = client.data.features.select_rows(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| client.data.labels[i]).collect();
            let keys = client.obfuscation.draw(batch.len());
            let (h, bcache) = client.bottom.forward(&x, client.obfuscation.training(&keys))?;
            let (logits, tcache) = client.top.forward(&h, crate::passport::Obfuscation::Plain)?;
            let (loss, g) = softmax_xent(&logits, &y)?;
            let tg = client.top.backward(&tcache, &g)?;
            let bg = client.bottom.backward(&bcache, &tg.x)?;
            client.opt_top.step(&mut client.top.params_mut(), &tg.params)?;
            client.opt_bottom.step(&mut client.bottom.params_mut(), &bg.params)?;
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// Elementwise mean of the uploaded parameter lists.
pub fn hfl_aggregate(uploads: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Argument("nothing to aggregate".into()))?;
    let k = uploads.len() as f64;
    let mut out: Vec<Tensor> = first.iter().map(Tensor::zeros_like).collect();
    for u in uploads {
        if u.len() != out.len() {
            return Err(Error::Dimension("uploads differ in tensor count".into()));
        }
        for (acc, t) in out.iter_mut().zip(u) {
            acc.add_assign(t)?;
        }
    }
    Ok(out.into_iter().map(|t| t.scale(1.0 / k)).collect())
}

#[derive(Debug)]
pub struct HflOutcome {
    pub clients: Vec<HflClient>,
    pub shared: Vec<Tensor>,
    pub metrics: Vec<MetricRecord>,
    pub log: MessageLog,
    /// Per-client training losses, one entry per local step.
    pub step_losses: Vec<Vec<f64>>,
}

impl HflOutcome {
    pub fn mean_test_accuracy(&self) -> f64 {
        let last = self.metrics.iter().map(|m| m.round).max().unwrap_or(0);
        let accs: Vec<f64> = self
            .metrics
            .iter()
            .filter(|m| m.round == last && m.split == "test")
            .map(|m| m.accuracy)
            .collect();
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    }
}

/// Builds clients over an IID split of `train` (client `k` gets every
/// `K`-th sample of a shuffled order) and runs the federation.
pub fn run_hfl(cfg: &HflConfig, train: &Dataset, test: &Dataset) -> Result<HflOutcome> {
    cfg.validate()?;
    if train.len() < cfg.clients {
        return Err(Error::Config("fewer training samples than clients".into()));
    }
    let (top, bottoms) = cfg.initial_models()?;
    let order = batch_order(train.len(), train.len(), &mut stream_rng(cfg.seed, SHUFFLE_STREAM - 1))
        .pop()
        .expect("non-empty");
    let mut clients = Vec::with_capacity(cfg.clients);
    for (k, bottom) in bottoms.into_iter().enumerate() {
        let idx: Vec<usize> = order.iter().copied().skip(k).step_by(cfg.clients).collect();
        clients.push(HflClient::new(
            k,
            bottom,
            top.clone(),
            train.select(&idx)?,
            cfg.passport,
            cfg.sgd,
            cfg.seed,
        )?);
    }
    let mut shared: Vec<Tensor> = top.params().into_iter().cloned().collect();
    let mut log = MessageLog::new(cfg.keep_messages);
    let mut metrics = Vec::new();
    let mut step_losses = vec![Vec::new(); cfg.clients];

    for c in &clients {
        let (loss, acc) = c.evaluate(test)?;
        metrics.push(record(0, c.id, "test", loss, acc));
    }
    for round in 1..=cfg.rounds {
        let mut uploads = Vec::with_capacity(cfg.clients);
        for c in clients.iter_mut() {
            let losses = hfl_local_epoch(c, &shared, cfg.batch_size, cfg.local_epochs)?;
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            step_losses[c.id].extend(losses);
            metrics.push(record(round, c.id, "train", mean, c.evaluate(&c.data)?.1));
            let mut upload = Vec::with_capacity(shared.len());
            for (p, s) in c.top.params().into_iter().zip(&shared) {
                if cfg.defense.kind == DefenseKind::None {
                    upload.push(p.clone());
                } else {
                    let delta = cfg.defense.apply(&p.sub(s)?, DefenseTarget::Gradients, &mut c.noise)?;
                    upload.push(s.add(&delta)?);
                }
            }
            let msg = FedMessage::WeightsUpload {
                round,
                party: c.id,
                weights: upload,
            };
            log.push(&msg);
            if let FedMessage::WeightsUpload { weights, .. } = msg {
                uploads.push(weights);
            }
        }
        shared = hfl_aggregate(&uploads)?;
        log.push(&FedMessage::WeightsBroadcast {
            round,
            weights: shared.clone(),
        });
        for c in clients.iter_mut() {
            set_params(&mut c.top, &shared)?;
            let (loss, acc) = c.evaluate(test)?;
            metrics.push(record(round, c.id, "test", loss, acc));
        }
    }
    Ok(HflOutcome {
        clients,
        shared,
        metrics,
        log,
        step_losses,
    })
}

fn record(round: usize, party: usize, split: &str, loss: f64, accuracy: f64) -> MetricRecord {
    MetricRecord {
        round,
        party: format!("client{party}"),
        split: split.into(),
        loss,
        accuracy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        let a = vec![Tensor::vector(vec![0.0])];
        let b = vec![Tensor::vector(vec![2.0])];
        assert_eq!(hfl_aggregate(&[a.clone(), b.clone()]).unwrap()[0].data(), &[1.0]);
        assert_eq!(hfl_aggregate(&[b.clone(), a.clone()]).unwrap(), hfl_aggregate(&[a.clone(), b]).unwrap());
        assert_eq!(hfl_aggregate(&[a.clone(), a.clone()]).unwrap(), a);
        let bad = vec![Tensor::vector(vec![0.0, 1.0])];
        assert!(hfl_aggregate(&[a, bad]).is_err());
    }
}
