//! Experiment configuration: TOML for people, JSON for generators, one schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::SyntheticKind;
use crate::attacks::{AttackConfig, PassportGuess, PmcHead, DEFAULT_AUX_SIZE};
use crate::error::{Error, Result};
use crate::fedsim::{HflConfig, PassportMode, VflConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hfl,
    Vfl,
    TheoryCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    MnistIdx { images: PathBuf, labels: PathBuf },
    Synthetic { generator: SyntheticKind, samples: usize, features: usize },
}

fn default_aux() -> usize {
    DEFAULT_AUX_SIZE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub test: usize,
    /// Taken from the front of the training split.
    #[serde(default = "default_aux")]
    pub aux: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PassportMeanRange,
    PassportVariance,
    DpNoise,
    SparsifyKeep,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::PassportMeanRange => "passport_mean_range",
            SweepParam::PassportVariance => "passport_variance",
            SweepParam::DpNoise => "dp_noise",
            SweepParam::SparsifyKeep => "sparsify_keep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

fn default_targets() -> usize {
    16
}

fn default_queries() -> usize {
    500
}

fn default_samples() -> usize {
    200
}

/// One attack to run against every trained point. Feature and completion
/// attacks in VFL target passive party `party`; NS/DS score the gradients
/// every passive party receives; gradient inversion targets HFL client 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AttackSpec {
    Wmi {
        config: AttackConfig,
        #[serde(default)]
        guess: PassportGuess,
        #[serde(default)]
        party: usize,
        /// Leading test samples whose embeddings are inverted.
        #[serde(default = "default_targets")]
        targets: usize,
    },
    Bmi {
        #[serde(default)]
        party: usize,
        #[serde(default = "default_targets")]
        targets: usize,
        /// Black-box queries, drawn from the front of the training split.
        #[serde(default = "default_queries")]
        queries: usize,
    },
    Wgi {
        config: AttackConfig,
        #[serde(default)]
        guess: PassportGuess,
    },
    Bgi {
        config: AttackConfig,
    },
    Pmc {
        #[serde(default)]
        head: PmcHead,
        /// Needed only for the MLP head.
        #[serde(default)]
        config: Option<AttackConfig>,
        #[serde(default)]
        party: usize,
    },
    Ns {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    Ds {
        #[serde(default = "default_samples")]
        samples: usize,
    },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Wmi { .. } => "wmi",
            AttackSpec::Bmi { .. } => "bmi",
            AttackSpec::Wgi { .. } => "wgi",
            AttackSpec::Bgi { .. } => "bgi",
            AttackSpec::Pmc { .. } => "pmc",
            AttackSpec::Ns { .. } => "ns",
            AttackSpec::Ds { .. } => "ds",
        }
    }

    fn supported_in(&self, mode: Mode) -> bool {
        match self {
            AttackSpec::Wgi { .. } | AttackSpec::Bgi { .. } => mode == Mode::Hfl,
            _ => mode == Mode::Vfl,
        }
    }
}

fn default_instances() -> usize {
    100
}

fn default_trials() -> u64 {
    100_000
}

fn default_ms() -> Vec<u32> {
    vec![1, 2, 3]
}

fn default_ranges() -> Vec<f64> {
    vec![2.0, 10.0, 50.0]
}

fn default_eps() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySpec {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_trials")]
    pub thm1_trials: u64,
    #[serde(default = "default_ms")]
    pub thm1_dims: Vec<u32>,
    #[serde(default = "default_ranges")]
    pub thm1_mean_ranges: Vec<f64>,
    #[serde(default = "default_eps")]
    pub thm1_eps: Vec<f64>,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self {
            instances: default_instances(),
            thm1_trials: default_trials(),
            thm1_dims: default_ms(),
            thm1_mean_ranges: default_ranges(),
            thm1_eps: default_eps(),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Runs per sweep value; point `i` uses seed `seed + i`.
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Write recovered inputs of feature attacks as PGM images.
    #[serde(default)]
    pub dump_images: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    /// Column ranges `[start, end)` of the last feature axis per passive
    /// party; even split when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertical_ranges: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hfl: Option<HflConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vfl: Option<VflConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheorySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackSpec>,
}

fn has_random_passport(modes: &[PassportMode]) -> bool {
    modes.iter().any(|m| matches!(m, PassportMode::Random { .. }))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parses by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    /// Canonical TOML form; parsing it back gives the same config and the
    /// same text.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("sweep values must be finite".into()));
            }
        }
        for a in &self.attacks {
            if !a.supported_in(self.mode) {
                return Err(Error::Config(format!(
                    "attack {} is not available in {:?} mode",
                    a.name(),
                    self.mode
                )));
            }
        }
        match self.mode {
            Mode::TheoryCheck => return Ok(()),
            Mode::Hfl => {
                let h = self.hfl.as_ref().ok_or_else(|| Error::Config("hfl mode needs an [hfl] table".into()))?;
                h.validate()?;
                self.check_sweep(&[h.passport])?;
            }
            Mode::Vfl => {
                let v = self.vfl.as_ref().ok_or_else(|| Error::Config("vfl mode needs a [vfl] table".into()))?;
                v.validate()?;
                self.check_sweep(&[v.passive_passport, v.active_passport])?;
            }
        }
        let split = self.split.ok_or_else(|| Error::Config("training modes need a [split] table".into()))?;
        if split.aux > split.train {
            return Err(Error::Config("auxiliary set must fit inside the training split".into()));
        }
        match &self.dataset {
            None => return Err(Error::Config("training modes need a [dataset] table".into())),
            Some(DatasetSpec::MnistIdx { images, labels }) => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
            }
            Some(DatasetSpec::Synthetic { samples, features, .. }) => {
                if *samples == 0 || *features == 0 {
                    return Err(Error::Config("synthetic data needs samples and features".into()));
                }
                if split.train + split.test > *samples {
                    return Err(Error::Config("split exceeds the synthetic sample count".into()));
                }
            }
        }
        Ok(())
    }

    fn check_sweep(&self, modes: &[PassportMode]) -> Result<()> {
        if let Some(s) = &self.sweep {
            let needs_passport = matches!(s.param, SweepParam::PassportMeanRange | SweepParam::PassportVariance);
            if needs_passport && !has_random_passport(modes) {
                return Err(Error::Config(format!(
                    "sweeping {} needs a random passport mode",
                    s.param.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const THEORY: &str = r#"
mode = "theory_check"
seed = 3

[theory]
instances = 10
"#;

    #[test]
    fn theory_config_parses_with_defaults() {
        let c = ExperimentConfig::from_toml(THEORY).unwrap();
        c.validate().unwrap();
        let t = c.theory.unwrap();
        assert_eq!(t.instances, 10);
        assert_eq!(t.thm1_trials, 100_000);
        assert_eq!(c.repeats, 1);
    }

    #[test]
    fn canonical_round_trip_and_hash() {
        let c = ExperimentConfig::from_toml(THEORY).unwrap();
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
        let json = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(json, c);
        let other = ExperimentConfig { seed: 4, ..c.clone() };
        assert_ne!(other.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn missing_tables_and_files_are_config_errors() {
        let c = ExperimentConfig::from_toml("mode = \"vfl\"\nseed = 1\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let bad = r#"
mode = "hfl"
seed = 1
[dataset]
source = "mnist_idx"
images = "/nonexistent/images"
labels = "/nonexistent/labels"
[split]
train = 10
test = 10
aux = 0
[hfl]
clients = 2
rounds = 1
batch_size = 4
bottom = [{ kind = "flatten" }]
top = [{ kind = "dense", inputs = 4, outputs = 2 }]
"#;
        let c = ExperimentConfig::from_toml(bad).unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
        assert!(ExperimentConfig::from_toml("mode = \"hfl\"").is_err());
    }

    #[test]
    fn attack_mode_mismatch_rejected() {
        let mut c = ExperimentConfig::from_toml(THEORY).unwrap();
        c.attacks.push(AttackSpec::Ns { samples: 10 });
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
