//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use std::path::PathBuf;

use adob_core::attacks::host_grads;
use adob_core::fedsim::{stream_rng, PartyObfuscation, PassportMode};
use adob_core::harness::config::{DatasetSpec, ExperimentConfig};
use adob_core::model::{LayerSpec, Model};
use adob_core::numcore::{softmax_xent, Tensor};
use adob_core::passport::RefreshPolicy;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Loads a config from `configs/` with dataset paths made absolute.
pub fn repo_config(name: &str) -> ExperimentConfig {
    let root = repo_root();
    let mut cfg = ExperimentConfig::load(&root.join("configs").join(name)).unwrap();
    if let Some(DatasetSpec::MnistIdx { images, labels }) = cfg.dataset.as_mut() {
        *images = root.join(&*images);
        *labels = root.join(&*labels);
    }
    cfg
}

/// Two-layer MLP on a flattened 4x4 input, four classes.
pub fn toy_specs(passport: bool) -> Vec<LayerSpec> {
    let first = if passport {
        LayerSpec::PassportDense { inputs: 16, outputs: 16, passport_len: 4 }
    } else {
        LayerSpec::Dense { inputs: 16, outputs: 16 }
    };
    vec![LayerSpec::Flatten, first, LayerSpec::Relu, LayerSpec::Dense { inputs: 16, outputs: 4 }]
}

pub fn fedadob_mode(mean_range: f64, variance: f64) -> PassportMode {
    PassportMode::Random { mean_range, variance, refresh: RefreshPolicy::PerBatch }
}

/// A toy gradient-inversion target: the model, its secret 4x4 input, and
/// the host-parameter gradients of one cross-entropy step on it.
pub struct GradTarget {
    pub specs: Vec<LayerSpec>,
    pub model: Model,
    pub x: Tensor,
    pub observed: Vec<Tensor>,
}

pub fn grad_target(mode: PassportMode, seed: u64) -> GradTarget {
    let specs = toy_specs(mode != PassportMode::Off);
    let mut rng = stream_rng(seed, 1);
    let model = Model::from_specs(&specs, &mut rng).unwrap();
    let x = Tensor::uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
    let y = [(seed % 4) as usize];
    let mut obf = PartyObfuscation::new(mode, &model, seed).unwrap();
    let keys = obf.draw(1);
    let (logits, cache) = model.forward(&x, obf.training(&keys)).unwrap();
    let (_, g) = softmax_xent(&logits, &y).unwrap();
    let grads = model.backward(&cache, &g).unwrap();
    let observed = host_grads(&model, &grads.params).unwrap();
    GradTarget { specs, model, x, observed }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
