//! Vertical federation: passive parties send embeddings, the active party
//! sums them, applies its passported top and returns embedding gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::messages::{FedMessage, MessageLog, MetricRecord};
use super::party::{batch_order, stream_rng, PartyObfuscation, PassportMode};
use crate::defenses::{DefenseConfig, DefenseTarget};
use crate::error::{Error, Result};
use crate::harness::data::VerticalShards;
use crate::metrics::accuracy;
use crate::model::{LayerSpec, Model};
use crate::numcore::{softmax_xent, Sgd, SgdConfig, Tensor};
use crate::passport::Passport;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 100;
const PASSPORT_STREAM: u64 = 200;
const ACTIVE_PASSPORT_STREAM: u64 = 250;
const DEFENSE_STREAM: u64 = 300;
const ACTIVE_DEFENSE_STREAM: u64 = 350;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VflConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// One bottom model per passive party.
    pub passive_bottoms: Vec<Vec<LayerSpec>>,
    pub top: Vec<LayerSpec>,
    #[serde(default)]
    pub passive_passport: PassportMode,
    #[serde(default)]
    pub active_passport: PassportMode,
    #[serde(default)]
    pub defense: DefenseConfig,
    /// Overridden per point when the config is part of an experiment.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub keep_messages: bool,
}

impl VflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passive_bottoms.is_empty() {
            return Err(Error::Config("need at least one passive party".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.sgd.validate()?;
        self.defense.validate()
    }

    /// Passive bottoms and the active top, as the run initialises them.
    pub fn initial_models(&self) -> Result<(Vec<Model>, Model)> {
        let mut init = stream_rng(self.seed, INIT_STREAM);
        let bottoms = self
            .passive_bottoms
            .iter()
            .map(|s| Model::from_specs(s, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let top = Model::from_specs(&self.top, &mut init)?;
        Ok((bottoms, top))
    }

    /// Batch-order stream of the run.
    pub fn shuffle_rng(&self) -> ChaCha8Rng {
        stream_rng(self.seed, SHUFFLE_STREAM)
    }
}

#[derive(Clone, Debug)]
pub struct VflPassiveParty {
    pub id: usize,
    pub bottom: Model,
    pub features: Tensor,
    pub sample_ids: Vec<u64>,
    pub obfuscation: PartyObfuscation,
    noise: ChaCha8Rng,
    opt: Sgd,
}

impl VflPassiveParty {
    pub fn new(id: usize, bottom: Model, features: Tensor, mode: PassportMode, sgd: SgdConfig, seed: u64) -> Result<Self> {
        let passport_seed = stream_rng(seed, PASSPORT_STREAM + id as u64).random();
        let n = features.shape()[0];
        Ok(Self {
            id,
            obfuscation: PartyObfuscation::new(mode, &bottom, passport_seed)?,
            bottom,
            features,
            sample_ids: (0..n as u64).collect(),
            noise: stream_rng(seed, DEFENSE_STREAM + id as u64),
            opt: Sgd::new(sgd),
        })
    }

    /// Forward embedding of `x` with the inference passport.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.bottom.predict(x, self.obfuscation.inference())
    }
}

#[derive(Clone, Debug)]
pub struct VflActiveParty {
    pub top: Model,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<u64>,
    pub obfuscation: PartyObfuscation,
    noise: ChaCha8Rng,
    opt: Sgd,
}

impl VflActiveParty {
    pub fn new(top: Model, labels: Vec<usize>, mode: PassportMode, sgd: SgdConfig, seed: u64) -> Result<Self> {
        let passport_seed = stream_rng(seed, ACTIVE_PASSPORT_STREAM).random();
        let n = labels.len();
        Ok(Self {
            obfuscation: PartyObfuscation::new(mode, &top, passport_seed)?,
            top,
            labels,
            sample_ids: (0..n as u64).collect(),
            noise: stream_rng(seed, ACTIVE_DEFENSE_STREAM),
            opt: Sgd::new(sgd),
        })
    }

    /// Loss and its gradient with respect to the summed embedding `h`.
    pub fn loss_at(&self, h: &Tensor, batch: &[usize], keys: &[Passport]) -> Result<(f64, Tensor)> {
        let y: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let (logits, cache) = self.top.forward(h, self.obfuscation.training(keys))?;
        let (loss, g) = softmax_xent(&logits, &y)?;
        Ok((loss, self.top.backward(&cache, &g)?.x))
    }
}

/// One synchronous training step over the rows `batch`. Returns the loss.
pub fn vfl_step(
    passives: &mut [VflPassiveParty],
    active: &mut VflActiveParty,
    batch: &[usize],
    round: usize,
    defense: &DefenseConfig,
    log: &mut MessageLog,
) -> Result<f64> {
    let n = batch.len();
    let expected: Vec<u64> = batch.iter().map(|&i| active.sample_ids[i]).collect();
    let mut caches = Vec::with_capacity(passives.len());
    let mut sum: Option<Tensor> = None;
    for p in passives.iter_mut() {
        let x = p.features.select_rows(batch)?;
        let keys = p.obfuscation.draw(n);
        let (h, cache) = p.bottom.forward(&x, p.obfuscation.training(&keys))?;
        caches.push(cache);
        let h = defense.apply(&h, DefenseTarget::Embeddings, &mut p.noise)?;
        let msg = FedMessage::Embedding {
            round,
            party: p.id,
            sample_ids: batch.iter().map(|&i| p.sample_ids[i]).collect(),
            h,
        };
        log.push(&msg);
        let FedMessage::Embedding { sample_ids, h, .. } = msg else {
            unreachable!()
        };
        if sample_ids != expected {
            return Err(Error::Protocol(format!(
                "party {} sent embeddings for misaligned sample ids",
                p.id
            )));
        }
        match sum.as_mut() {
            Some(s) => s.add_assign(&h)?,
            None => sum = Some(h),
        }
    }
    let h = sum.ok_or_else(|| Error::Config("no passive parties".into()))?;

    let y: Vec<usize> = batch.iter().map(|&i| active.labels[i]).collect();
    let keys = active.obfuscation.draw(n);
    let (logits, cache) = active.top.forward(&h, active.obfuscation.training(&keys))?;
    let (loss, g) = softmax_xent(&logits, &y)?;
    let tg = active.top.backward(&cache, &g)?;
    active.opt.step(&mut active.top.params_mut(), &tg.params)?;

    for (p, cache) in passives.iter_mut().zip(&caches) {
        let grad = defense.apply(&tg.x, DefenseTarget::Gradients, &mut active.noise)?;
        let msg = FedMessage::EmbeddingGrad {
            round,
            party: p.id,
            grad,
        };
        log.push(&msg);
        let FedMessage::EmbeddingGrad { grad, .. } = msg else {
            unreachable!()
        };
        let bg = p.bottom.backward(cache, &grad)?;
        p.opt.step(&mut p.bottom.params_mut(), &bg.params)?;
    }
    Ok(loss)
}

/// Logits for aligned feature shards using inference passports.
pub fn vfl_predict(passives: &[VflPassiveParty], active: &VflActiveParty, shards: &[Tensor]) -> Result<Tensor> {
    if shards.len() != passives.len() {
        return Err(Error::Config(format!(
            "{} shards for {} passive parties",
            shards.len(),
            passives.len()
        )));
    }
    let mut h: Option<Tensor> = None;
    for (p, x) in passives.iter().zip(shards) {
        let e = p.embed(x)?;
        match h.as_mut() {
            Some(s) => s.add_assign(&e)?,
            None => h = Some(e),
        }
    }
    active
        .top
        .predict(&h.expect("at least one party"), active.obfuscation.inference())
}

#[derive(Debug)]
pub struct VflOutcome {
    pub passives: Vec<VflPassiveParty>,
    pub active: VflActiveParty,
    pub metrics: Vec<MetricRecord>,
    pub log: MessageLog,
    pub step_losses: Vec<f64>,
}

impl VflOutcome {
    pub fn final_test_accuracy(&self) -> f64 {
        self.metrics
            .iter()
            .rev()
            .find(|m| m.split == "test")
            .map_or(0.0, |m| m.accuracy)
    }
}

pub fn run_vfl(cfg: &VflConfig, train: &VerticalShards, test: &VerticalShards) -> Result<VflOutcome> {
    cfg.validate()?;
    if train.shards.len() != cfg.passive_bottoms.len() || test.shards.len() != train.shards.len() {
        return Err(Error::Config(format!(
            "{} passive bottoms but {} train / {} test shards",
            cfg.passive_bottoms.len(),
            train.shards.len(),
            test.shards.len()
        )));
    }
    let (bottoms, top) = cfg.initial_models()?;
    let mut passives = bottoms
        .into_iter()
        .zip(&train.shards)
        .enumerate()
        .map(|(k, (b, x))| VflPassiveParty::new(k, b, x.clone(), cfg.passive_passport, cfg.sgd, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut active = VflActiveParty::new(top, train.labels.clone(), cfg.active_passport, cfg.sgd, cfg.seed)?;
    let mut shuffle = cfg.shuffle_rng();
    let mut log = MessageLog::new(cfg.keep_messages);
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();

    let eval = |passives: &[VflPassiveParty], active: &VflActiveParty, metrics: &mut Vec<MetricRecord>, round: usize| -> Result<()> {
        let logits = vfl_predict(passives, active, &test.shards)?;
        let (loss, _) = softmax_xent(&logits, &test.labels)?;
        metrics.push(MetricRecord {
            round,
            party: "active".into(),
            split: "test".into(),
            loss,
            accuracy: accuracy(&logits, &test.labels)?,
        });
        Ok(())
    };
    eval(&passives, &active, &mut metrics, 0)?;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = batch_order(train.labels.len(), cfg.batch_size, &mut shuffle);
        for batch in &batches {
            let loss = vfl_step(&mut passives, &mut active, batch, epoch, &cfg.defense, &mut log)?;
            total += loss;
            step_losses.push(loss);
        }
        let logits = vfl_predict(&passives, &active, &train.shards)?;
        metrics.push(MetricRecord {
            round: epoch,
            party: "active".into(),
            split: "train".into(),
            loss: total / batches.len() as f64,
            accuracy: accuracy(&logits, &train.labels)?,
        });
        eval(&passives, &active, &mut metrics, epoch)?;
    }
    Ok(VflOutcome {
        passives,
        active,
        metrics,
        log,
        step_losses,
    })
}
