//! Runs a configured experiment: train every sweep point, attack the
//! snapshots, and write the report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AttackSpec, DatasetSpec, ExperimentConfig, Mode, SweepParam};
use super::data::{even_ranges, gen_synthetic, load_mnist_idx, vertical_split, Dataset, Splits, VerticalShards};
use crate::attacks::{
    bgi_attack, bmi_attack, ds_attack, host_grads, ns_attack, pmc_attack, score_report, wgi_attack, wmi_attack,
    write_pgm, AttackConfig, AttackName, AttackReport, Recovered,
};
use crate::defenses::{DefenseConfig, DefenseKind, DefenseTarget};
use crate::error::{Error, Result};
use crate::fedsim::{run_hfl, run_vfl, stream_rng, HflConfig, MetricRecord, PassportMode, VflConfig, VflOutcome};
use crate::metrics::{cap, TradeoffPoint};
use crate::model::Model;
use crate::numcore::{softmax_xent, Tensor};
use crate::theory::{lemma_suite, thm1_grid, thm1_report, Thm1Cell, TheoryReport};

pub const REPORT_FILE: &str = "report.json";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const THEORY_FILE: &str = "theory_report.json";

const ATTACK_DEFENSE_STREAM: u64 = 900;

/// One line of the trade-off table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub param_name: String,
    pub param_value: f64,
    pub accuracy: f64,
    pub recovery_error: f64,
    pub attack: String,
    pub defense: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub index: usize,
    pub seed: u64,
    pub param_value: f64,
    pub defense: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapEntry {
    pub attack: String,
    pub defense: String,
    pub cap: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub points: Vec<PointSummary>,
    pub rows: Vec<TradeoffRow>,
    pub cap: Vec<CapEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub theory: Vec<TheoryReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thm1_cells: Vec<Thm1Cell>,
}

#[derive(Serialize)]
struct MetricLine<'a> {
    point: usize,
    seed: u64,
    #[serde(flatten)]
    record: &'a MetricRecord,
}

/// Result of one trained point, before it is written out.
struct PointResult {
    summary: PointSummary,
    metrics: Vec<MetricRecord>,
    reports: Vec<AttackReport>,
}

/// Input shape of the recovered images, for PGM output.
fn image_dims(shape: &[usize]) -> Option<(usize, usize)> {
    (shape.len() >= 3).then(|| (shape[shape.len() - 2], shape[shape.len() - 1]))
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset.as_ref().ok_or_else(|| Error::Config("no dataset configured".into()))? {
        DatasetSpec::MnistIdx { images, labels } => load_mnist_idx(images, labels),
        DatasetSpec::Synthetic { generator, samples, features } => gen_synthetic(*generator, *samples, *features, cfg.seed),
    }
}

fn set_passports(mode: &mut PassportMode, param: SweepParam, value: f64) {
    if let PassportMode::Random { mean_range, variance, .. } = mode {
        match param {
            SweepParam::PassportMeanRange => *mean_range = value,
            SweepParam::PassportVariance => *variance = value,
            _ => {}
        }
    }
}

fn set_defense(defense: &mut DefenseConfig, param: SweepParam, value: f64) {
    match param {
        SweepParam::DpNoise => defense.kind = DefenseKind::DpGaussian { noise_level: value },
        SweepParam::SparsifyKeep => defense.kind = DefenseKind::Sparsify { keep_fraction: value },
        _ => {}
    }
}

fn defense_label(passports: &[PassportMode], defense: &DefenseConfig) -> String {
    let adaptive = passports.iter().any(|m| matches!(m, PassportMode::Random { .. }));
    match (adaptive, defense.kind) {
        (true, DefenseKind::None) => "fedadob".into(),
        (true, _) => format!("fedadob+{}", defense.label()),
        (false, _) => defense.label(),
    }
}

/// Shared, read-only inputs of every point.
enum Prepared {
    Hfl { train: Dataset, test: Dataset },
    Vfl { train: VerticalShards, test: VerticalShards },
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let ds = load_dataset(cfg)?;
    let split = cfg.split.ok_or_else(|| Error::Config("no split configured".into()))?;
    let splits = Splits::new(ds.len(), split.train, split.test, split.aux, cfg.seed)?;
    splits.check_disjoint()?;
    let train = ds.select(&splits.train)?;
    let test = ds.select(&splits.test)?;
    Ok(match cfg.mode {
        Mode::Hfl => Prepared::Hfl { train, test },
        Mode::Vfl => {
            let v = cfg.vfl.as_ref().ok_or_else(|| Error::Config("no [vfl] table".into()))?;
            let ranges: Vec<(usize, usize)> = match &cfg.vertical_ranges {
                Some(r) => r.iter().map(|&[a, b]| (a, b)).collect(),
                None => even_ranges(train.features.last_dim(), v.passive_bottoms.len()),
            };
            Prepared::Vfl {
                train: vertical_split(&train, &ranges)?,
                test: vertical_split(&test, &ranges)?,
            }
        }
        Mode::TheoryCheck => unreachable!("theory runs do not train"),
    })
}

fn rows_of(t: &Tensor, n: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..n.min(t.shape()[0])).collect();
    t.select_rows(&idx)
}

fn attack_seed(cfg: &AttackConfig, point_seed: u64) -> AttackConfig {
    AttackConfig { seed: cfg.seed.wrapping_add(point_seed), ..*cfg }
}

fn run_hfl_point(cfg: &HflConfig, attacks: &[AttackSpec], train: &Dataset, test: &Dataset, seed: u64) -> Result<(f64, Vec<MetricRecord>, Vec<AttackReport>)> {
    let out = run_hfl(cfg, train, test)?;
    let mut reports = Vec::new();
    if !attacks.is_empty() {
        // Client 0 uploads the gradient of one test sample through its full
        // model; inversion attackers observe the host part.
        let client = &out.clients[0];
        let layers = client.bottom.layers().iter().chain(client.top.layers()).cloned().collect();
        let model = Model::new(layers)?;
        let x = rows_of(&test.features, 1)?;
        let y = vec![test.labels[0]];
        let mut obf = client.obfuscation.clone();
        let keys = obf.draw(1);
        let (logits, cache) = model.forward(&x, obf.training(&keys))?;
        let (_, g) = softmax_xent(&logits, &y)?;
        let grads = model.backward(&cache, &g)?;
        let mut noise = stream_rng(seed, ATTACK_DEFENSE_STREAM);
        let observed = host_grads(&model, &grads.params)?
            .iter()
            .map(|t| cfg.defense.apply(t, DefenseTarget::Gradients, &mut noise))
            .collect::<Result<Vec<_>>>()?;
        let input_shape = &x.shape()[1..];
        let architecture: Vec<_> = cfg.bottom.iter().chain(&cfg.top).cloned().collect();
        for a in attacks {
            reports.push(match a {
                AttackSpec::Wgi { config, guess } => {
                    wgi_attack(&observed, &model, *guess, input_shape, &attack_seed(config, seed), &x)?
                }
                AttackSpec::Bgi { config } => bgi_attack(&observed, &architecture, input_shape, &attack_seed(config, seed), &x)?,
                other => return Err(Error::Config(format!("attack {} needs vfl mode", other.name()))),
            });
        }
    }
    Ok((out.mean_test_accuracy(), out.metrics, reports))
}

/// Embeddings party `party` sends for `x`, taken in chunks of `batch` rows
/// with training passports from a copy of its passport stream.
fn observe_embeddings(out: &VflOutcome, party: usize, x: &Tensor, batch: usize) -> Result<Tensor> {
    let p = &out.passives[party];
    let mut obf = p.obfuscation.clone();
    let n = x.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let keys = obf.draw(idx.len());
        let h = p.bottom.predict(&x.select_rows(&idx)?, obf.training(&keys))?;
        shape = h.shape().to_vec();
        data.extend_from_slice(h.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Per-sample gradients the active party returns for the first `n` training
/// rows, after the configured defense. Embeddings are summed, so every
/// passive party receives the same gradient.
fn embedding_grads(cfg: &VflConfig, out: &VflOutcome, train: &VerticalShards, n: usize, seed: u64) -> Result<Tensor> {
    let n = n.min(train.labels.len());
    let mut active_obf = out.active.obfuscation.clone();
    let mut noise = stream_rng(seed, ATTACK_DEFENSE_STREAM);
    let mut data = Vec::new();
    let mut width = 0;
    for i in 0..n {
        let mut h: Option<Tensor> = None;
        for (p, x) in out.passives.iter().zip(&train.shards) {
            let e = p.embed(&x.select_rows(&[i])?)?;
            match h.as_mut() {
                Some(s) => s.add_assign(&e)?,
                None => h = Some(e),
            }
        }
        let h = h.ok_or_else(|| Error::Config("no passive parties".into()))?;
        let keys = active_obf.draw(1);
        let (_, g) = out.active.loss_at(&h, &[i], &keys)?;
        let g = cfg.defense.apply(&g, DefenseTarget::Gradients, &mut noise)?;
        width = g.len();
        data.extend_from_slice(g.data());
    }
    Tensor::new(vec![n, width], data)
}

fn run_vfl_point(
    cfg: &VflConfig,
    attacks: &[AttackSpec],
    train: &VerticalShards,
    test: &VerticalShards,
    aux: usize,
    seed: u64,
) -> Result<(f64, Vec<MetricRecord>, Vec<AttackReport>)> {
    let out = run_vfl(cfg, train, test)?;
    let check_party = |party: usize| {
        if party >= out.passives.len() {
            Err(Error::Config(format!("no passive party {party}")))
        } else {
            Ok(party)
        }
    };
    let mut reports = Vec::new();
    for a in attacks {
        reports.push(match a {
            AttackSpec::Wmi { config, guess, party, targets } => {
                let party = check_party(*party)?;
                let x = rows_of(&test.shards[party], *targets)?;
                let h = observe_embeddings(&out, party, &x, cfg.batch_size)?;
                wmi_attack(&out.passives[party].bottom, &h, &x.shape()[1..], *guess, &attack_seed(config, seed), &x)?
            }
            AttackSpec::Bmi { party, targets, queries } => {
                let party = check_party(*party)?;
                let qx = rows_of(&train.shards[party], *queries)?;
                let qh = observe_embeddings(&out, party, &qx, cfg.batch_size)?;
                let x = rows_of(&test.shards[party], *targets)?;
                let h = observe_embeddings(&out, party, &x, cfg.batch_size)?;
                bmi_attack(&qx, &qh, &h, &x)?
            }
            AttackSpec::Pmc { head, config, party } => {
                let party = check_party(*party)?;
                let aux_idx: Vec<usize> = (0..aux).collect();
                let aux_set = Dataset::new(
                    train.shards[party].select_rows(&aux_idx)?,
                    aux_idx.iter().map(|&i| train.labels[i]).collect(),
                    train.num_classes,
                )?;
                let test_set = Dataset::new(test.shards[party].clone(), test.labels.clone(), test.num_classes)?;
                let acfg = config.map_or(
                    AttackConfig { iterations: 1, learning_rate: 0.1, tv_lambda: 0.0, restarts: 1, seed: 0 },
                    |c| attack_seed(&c, seed),
                );
                let p = &out.passives[party];
                pmc_attack(&p.bottom, p.obfuscation.inference(), &aux_set, &test_set, *head, &acfg)?
            }
            AttackSpec::Ns { samples } | AttackSpec::Ds { samples } => {
                let grads = embedding_grads(cfg, &out, train, *samples, seed)?;
                let labels = &train.labels[..grads.shape()[0]];
                if matches!(a, AttackSpec::Ns { .. }) {
                    score_report(AttackName::Ns, ns_attack(&grads)?, labels)?
                } else {
                    // The attacker knows the label of one positive sample.
                    let pos = labels
                        .iter()
                        .position(|&l| l == 1)
                        .ok_or_else(|| Error::Argument("no positive sample to use as reference".into()))?;
                    score_report(AttackName::Ds, ds_attack(&grads, grads.row(pos))?, labels)?
                }
            }
            other => return Err(Error::Config(format!("attack {} needs hfl mode", other.name()))),
        });
    }
    Ok((out.final_test_accuracy(), out.metrics, reports))
}

fn run_point(cfg: &ExperimentConfig, data: &Prepared, index: usize, value: Option<f64>) -> Result<PointResult> {
    let seed = cfg.seed.wrapping_add(index as u64);
    let param = cfg.sweep.as_ref().map(|s| s.param);
    let (accuracy, metrics, reports, defense) = match data {
        Prepared::Hfl { train, test } => {
            let mut h = cfg.hfl.clone().ok_or_else(|| Error::Config("no [hfl] table".into()))?;
            h.seed = seed;
            if let (Some(p), Some(v)) = (param, value) {
                set_passports(&mut h.passport, p, v);
                set_defense(&mut h.defense, p, v);
            }
            let label = defense_label(&[h.passport], &h.defense);
            let (acc, m, r) = run_hfl_point(&h, &cfg.attacks, train, test, seed)?;
            (acc, m, r, label)
        }
        Prepared::Vfl { train, test } => {
            let mut v = cfg.vfl.clone().ok_or_else(|| Error::Config("no [vfl] table".into()))?;
            v.seed = seed;
            if let (Some(p), Some(val)) = (param, value) {
                set_passports(&mut v.passive_passport, p, val);
                set_passports(&mut v.active_passport, p, val);
                set_defense(&mut v.defense, p, val);
            }
            let label = defense_label(&[v.passive_passport, v.active_passport], &v.defense);
            let aux = cfg.split.map_or(0, |s| s.aux);
            let (acc, m, r) = run_vfl_point(&v, &cfg.attacks, train, test, aux, seed)?;
            (acc, m, r, label)
        }
    };
    Ok(PointResult {
        summary: PointSummary {
            index,
            seed,
            param_value: value.unwrap_or(0.0),
            defense,
            accuracy,
        },
        metrics,
        reports,
    })
}

fn write_csv(rows: &[TradeoffRow], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "param_name,param_value,accuracy,recovery_error,attack,defense,seed")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.param_name, r.param_value, r.accuracy, r.recovery_error, r.attack, r.defense, r.seed
        )?;
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run_theory(cfg: &ExperimentConfig, out_dir: &Path, hash: String) -> Result<ExperimentReport> {
    let spec = cfg.theory.clone().unwrap_or_default();
    let mut theory = lemma_suite(spec.instances, cfg.seed)?;
    let cells = thm1_grid(&spec.thm1_dims, &spec.thm1_mean_ranges, &spec.thm1_eps, spec.thm1_trials, cfg.seed)?;
    theory.push(thm1_report(&cells));
    write_json(&theory, &out_dir.join(THEORY_FILE))?;
    let report = ExperimentReport {
        config_hash: hash,
        seed: cfg.seed,
        mode: cfg.mode,
        points: Vec::new(),
        rows: Vec::new(),
        cap: Vec::new(),
        theory,
        thm1_cells: cells,
    };
    write_json(&report, &out_dir.join(REPORT_FILE))?;
    Ok(report)
}

/// Runs `cfg` with up to `jobs` points in parallel and writes the report
/// files into `out_dir`. Points are numbered value-major (`value index *
/// repeats + repeat`) and point `i` trains with seed `cfg.seed + i`; the
/// outputs do not depend on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let hash = cfg.hash()?;
    if cfg.mode == Mode::TheoryCheck {
        return run_theory(cfg, out_dir, hash);
    }
    let data = prepare(cfg)?;
    let values: Vec<Option<f64>> = match &cfg.sweep {
        Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
        None => vec![None],
    };
    let plan: Vec<(usize, Option<f64>)> = values
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, cfg.repeats))
        .enumerate()
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<PointResult> = pool.install(|| {
        plan.par_iter()
            .map(|&(i, v)| run_point(cfg, &data, i, v))
            .collect::<Result<Vec<_>>>()
    })?;

    let param_name = cfg.sweep.as_ref().map_or("none", |s| s.param.as_str());
    let mut rows = Vec::new();
    let mut metric_file = fs::File::create(out_dir.join(METRICS_FILE))?;
    let image_dir = out_dir.join("images");
    for r in &results {
        let s = &r.summary;
        for m in &r.metrics {
            let line = MetricLine { point: s.index, seed: s.seed, record: m };
            writeln!(metric_file, "{}", serde_json::to_string(&line)?)?;
        }
        for (k, a) in r.reports.iter().enumerate() {
            rows.push(TradeoffRow {
                param_name: param_name.into(),
                param_value: s.param_value,
                accuracy: s.accuracy,
                recovery_error: a.recovery_error,
                attack: a.attack_name.as_str().into(),
                defense: s.defense.clone(),
                seed: s.seed,
                config_hash: hash.clone(),
            });
            if let (true, Recovered::Features(x)) = (cfg.dump_images, &a.recovered) {
                if let Some((h, w)) = image_dims(x.shape()) {
                    fs::create_dir_all(&image_dir)?;
                    for (j, chunk) in x.data().chunks(h * w).enumerate() {
                        let name = format!("point{}_{}_{k}_{j}.pgm", s.index, a.attack_name.as_str());
                        write_pgm(&image_dir.join(name), chunk, h, w)?;
                    }
                }
            }
        }
    }

    let mut groups: BTreeMap<(String, String), Vec<TradeoffPoint>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r.attack.clone(), r.defense.clone()))
            .or_default()
            .push(TradeoffPoint::new(r.param_value, r.accuracy, r.recovery_error)?);
    }
    let cap_entries = groups
        .into_iter()
        .map(|((attack, defense), pts)| {
            Ok(CapEntry { cap: cap(&pts)?, points: pts.len(), attack, defense })
        })
        .collect::<Result<Vec<_>>>()?;

    write_csv(&rows, &out_dir.join(TRADEOFF_FILE))?;
    let report = ExperimentReport {
        config_hash: hash,
        seed: cfg.seed,
        mode: cfg.mode,
        points: results.into_iter().map(|r| r.summary).collect(),
        rows,
        cap: cap_entries,
        theory: Vec::new(),
        thm1_cells: Vec::new(),
    };
    write_json(&report, &out_dir.join(REPORT_FILE))?;
    Ok(report)
}
