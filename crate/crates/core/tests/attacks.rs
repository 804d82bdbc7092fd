mod common;

use adob_core::attacks::{
    bgi_attack, bmi_attack, ds_attack, ns_attack, pmc_attack, score_recovery_error, wgi_attack, wmi_attack,
    AttackConfig, PassportGuess, PmcHead,
};
use adob_core::defenses::{dp_perturb, sparsify};
use adob_core::error::Error;
use adob_core::fedsim::{stream_rng, PartyObfuscation, PassportMode};
use adob_core::harness::data::{gen_synthetic, Dataset, SyntheticKind};
use adob_core::model::{Layer, LayerSpec, Model};
use adob_core::numcore::{DenseLayer, Tensor};
use adob_core::passport::Obfuscation;
use common::{fedadob_mode, grad_target, mean, GradTarget};
use rand::Rng;

fn inversion_cfg(seed: u64) -> AttackConfig {
    AttackConfig { iterations: 2000, learning_rate: 1.0, tv_lambda: 0.0, restarts: 1, seed }
}

fn wmi_cfg(seed: u64) -> AttackConfig {
    AttackConfig { iterations: 2000, learning_rate: 4.0, tv_lambda: 0.0, restarts: 1, seed }
}

/// `n` smooth 8x8 images: one random plane wave each.
fn smooth_images(n: usize, seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 7);
    let mut data = Vec::with_capacity(n * 64);
    for _ in 0..n {
        let (a, b, c): (f64, f64, f64) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6), rng.random_range(0.0..6.0));
        for i in 0..8 {
            for j in 0..8 {
                data.push(0.5 + 0.35 * (a * i as f64 + b * j as f64 + c).sin());
            }
        }
    }
    Tensor::new(vec![n, 8, 8], data).unwrap()
}

fn relu_bottom(passport: bool, seed: u64) -> Model {
    let last = if passport {
        LayerSpec::PassportDense { inputs: 128, outputs: 96, passport_len: 4 }
    } else {
        LayerSpec::Dense { inputs: 128, outputs: 96 }
    };
    let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 64, outputs: 128 }, LayerSpec::Relu, last];
    Model::from_specs(&specs, &mut stream_rng(seed, 3)).unwrap()
}

fn wmi_error(bottom: &Model, h: &Tensor, x: &Tensor, seed: u64) -> f64 {
    wmi_attack(bottom, h, &[8, 8], PassportGuess::Identity, &wmi_cfg(seed), x)
        .unwrap()
        .recovery_error
}

/// Embeddings of `x` under fresh per-batch passports, `batch` rows at a time.
fn passported_embeddings(bottom: &Model, x: &Tensor, mode: PassportMode, batch: usize, seed: u64) -> Tensor {
    let mut obf = PartyObfuscation::new(mode, bottom, seed).unwrap();
    let n = x.shape()[0];
    let mut data = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let keys = obf.draw(idx.len());
        let h = bottom.predict(&x.select_rows(&idx).unwrap(), obf.training(&keys)).unwrap();
        width = h.shape()[1];
        data.extend_from_slice(h.data());
    }
    Tensor::new(vec![n, width], data).unwrap()
}

#[test]
fn wmi_recovers_smooth_images_from_linear_bottom() {
    let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 64, outputs: 128 }];
    for seed in 0..3 {
        let bottom = Model::from_specs(&specs, &mut stream_rng(seed, 3)).unwrap();
        let x = smooth_images(4, seed);
        let h = bottom.predict(&x, Obfuscation::Plain).unwrap();
        let err = wmi_error(&bottom, &h, &x, seed);
        assert!(err <= 0.01, "seed {seed}: {err}");
    }
}

#[test]
fn wmi_is_exact_when_the_guess_matches() {
    // Embeddings produced with the attacker's own gamma = 1, beta = 0.
    let specs = [
        LayerSpec::Flatten,
        LayerSpec::PassportDense { inputs: 64, outputs: 128, passport_len: 4 },
    ];
    let bottom = Model::from_specs(&specs, &mut stream_rng(5, 3)).unwrap();
    let x = smooth_images(3, 5);
    let (ones, zeros) = (vec![1.0; 128], vec![0.0; 128]);
    let h = bottom.predict(&x, Obfuscation::Fixed { gamma: &ones, beta: &zeros }).unwrap();
    assert!(wmi_error(&bottom, &h, &x, 5) < 1e-6);
}

#[test]
fn wmi_passports_raise_error_fivefold() {
    for seed in 0..2 {
        let bottom = relu_bottom(true, seed);
        let x = smooth_images(4, seed);
        let plain = wmi_error(&bottom, &bottom.predict(&x, Obfuscation::Plain).unwrap(), &x, seed);
        let h = passported_embeddings(&bottom, &x, fedadob_mode(50.0, 1.0), 4, seed);
        let defended = wmi_error(&bottom, &h, &x, seed);
        assert!(defended >= 5.0 * plain, "seed {seed}: {defended} vs {plain}");
    }
}

#[test]
fn wmi_rejects_non_finite_targets() {
    let bottom = relu_bottom(false, 0);
    let x = smooth_images(1, 0);
    let mut h = bottom.predict(&x, Obfuscation::Plain).unwrap();
    h.data_mut()[0] = f64::NAN;
    let r = wmi_attack(&bottom, &h, &[8, 8], PassportGuess::Identity, &wmi_cfg(0), &x);
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn bmi_inverts_identity_bottom() {
    let x = smooth_images(80, 1);
    let h = x.clone().reshape(&[80, 64]).unwrap();
    let target = smooth_images(5, 2);
    let ht = target.clone().reshape(&[5, 64]).unwrap();
    let r = bmi_attack(&x, &h, &ht, &target).unwrap();
    assert!(r.recovery_error <= 1e-3, "{}", r.recovery_error);
    // A queried embedding comes back as the stored input.
    let again = bmi_attack(&x, &h, &h.select_rows(&[3]).unwrap(), &x.select_rows(&[3]).unwrap()).unwrap();
    assert!(again.recovery_error < 1e-12);
}

#[test]
fn bmi_needs_two_queries() {
    let x = smooth_images(1, 1);
    let h = x.clone().reshape(&[1, 64]).unwrap();
    assert!(matches!(bmi_attack(&x, &h, &h, &x), Err(Error::Config(_))));
}

#[test]
fn bmi_per_batch_passports_spoil_the_queries() {
    let specs = [
        LayerSpec::Flatten,
        LayerSpec::PassportDense { inputs: 64, outputs: 96, passport_len: 4 },
    ];
    for seed in 0..3 {
        let bottom = Model::from_specs(&specs, &mut stream_rng(seed, 3)).unwrap();
        let queries = smooth_images(200, seed);
        let targets = smooth_images(8, seed + 100);
        let plain = bmi_attack(
            &queries,
            &bottom.predict(&queries, Obfuscation::Plain).unwrap(),
            &bottom.predict(&targets, Obfuscation::Plain).unwrap(),
            &targets,
        )
        .unwrap()
        .recovery_error;
        let mode = fedadob_mode(50.0, 1.0);
        let qh = passported_embeddings(&bottom, &queries, mode, 8, seed);
        let th = passported_embeddings(&bottom, &targets, mode, 8, seed + 1);
        let defended = bmi_attack(&queries, &qh, &th, &targets).unwrap().recovery_error;
        assert!(defended >= 3.0 * plain && defended > 1e-3, "seed {seed}: {defended} vs {plain}");
    }
}

#[test]
fn wmi_not_worse_than_bmi_on_average() {
    // Unstructured images: smooth ones live on a low-dimensional manifold
    // that an affine inverse captures almost exactly.
    let (mut w, mut b) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let bottom = relu_bottom(false, seed);
        let mut rng = stream_rng(seed, 8);
        let x = Tensor::uniform(&[4, 8, 8], 0.0, 1.0, &mut rng);
        let h = bottom.predict(&x, Obfuscation::Plain).unwrap();
        w.push(wmi_error(&bottom, &h, &x, seed));
        let queries = Tensor::uniform(&[40, 8, 8], 0.0, 1.0, &mut rng);
        let qh = bottom.predict(&queries, Obfuscation::Plain).unwrap();
        b.push(bmi_attack(&queries, &qh, &h, &x).unwrap().recovery_error);
    }
    assert!(mean(&w) <= mean(&b), "wmi {w:?} bmi {b:?}");
}

fn wgi_error(t: &GradTarget, seed: u64) -> f64 {
    wgi_attack(&t.observed, &t.model, PassportGuess::Identity, &[4, 4], &inversion_cfg(seed), &t.x)
        .unwrap()
        .recovery_error
}

fn bgi_error(t: &GradTarget, seed: u64) -> f64 {
    bgi_attack(&t.observed, &t.specs, &[4, 4], &inversion_cfg(seed), &t.x)
        .unwrap()
        .recovery_error
}

#[test]
fn wgi_recovers_undefended_toy_input() {
    for seed in 1..4 {
        let err = wgi_error(&grad_target(PassportMode::Off, seed), seed);
        assert!(err <= 0.01, "seed {seed}: {err}");
    }
}

#[test]
fn gradient_inversion_rejects_zero_gradients() {
    let t = grad_target(PassportMode::Off, 1);
    let zeros: Vec<Tensor> = t.observed.iter().map(Tensor::zeros_like).collect();
    let cfg = inversion_cfg(1);
    let w = wgi_attack(&zeros, &t.model, PassportGuess::Identity, &[4, 4], &cfg, &t.x);
    assert!(matches!(w, Err(Error::Degenerate(_))));
    let b = bgi_attack(&zeros, &t.specs, &[4, 4], &cfg, &t.x);
    assert!(matches!(b, Err(Error::Degenerate(_))));
}

#[test]
fn white_box_not_worse_than_black_box_undefended() {
    let (mut w, mut b) = (Vec::new(), Vec::new());
    for seed in 1..6 {
        let t = grad_target(PassportMode::Off, seed);
        w.push(wgi_error(&t, seed));
        b.push(bgi_error(&t, seed));
    }
    assert!(b.iter().all(|v| v.is_finite()));
    assert!(mean(&w) <= mean(&b), "wgi {w:?} bgi {b:?}");
}

#[test]
fn passports_raise_every_feature_attack_error() {
    let (mut wu, mut wd, mut bu, mut bd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 1..6 {
        let u = grad_target(PassportMode::Off, seed);
        let d = grad_target(fedadob_mode(5.0, 5.0), seed);
        wu.push(wgi_error(&u, seed));
        wd.push(wgi_error(&d, seed));
        bu.push(bgi_error(&u, seed));
        bd.push(bgi_error(&d, seed));
    }
    assert!(mean(&wd) > mean(&wu), "wgi {wd:?} vs {wu:?}");
    assert!(mean(&bd) > mean(&bu), "bgi {bd:?} vs {bu:?}");

    let (mut mu, mut md) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let bottom = relu_bottom(true, seed);
        let x = smooth_images(2, seed);
        mu.push(wmi_error(&bottom, &bottom.predict(&x, Obfuscation::Plain).unwrap(), &x, seed));
        let h = passported_embeddings(&bottom, &x, fedadob_mode(5.0, 1.0), 2, seed);
        md.push(wmi_error(&bottom, &h, &x, seed));
    }
    assert!(mean(&md) > mean(&mu), "wmi {md:?} vs {mu:?}");
}

#[test]
fn defenses_degrade_gradient_inversion_monotonically() {
    let seeds = [1u64, 2, 3];
    let targets: Vec<GradTarget> = seeds.iter().map(|&s| grad_target(PassportMode::Off, s)).collect();
    let run = |perturb: &dyn Fn(&Tensor, u64) -> Tensor| -> f64 {
        let errs: Vec<f64> = seeds
            .iter()
            .zip(&targets)
            .map(|(&s, t)| {
                let observed: Vec<Tensor> = t.observed.iter().map(|g| perturb(g, s)).collect();
                wgi_attack(&observed, &t.model, PassportGuess::Identity, &[4, 4], &inversion_cfg(s), &t.x)
                    .unwrap()
                    .recovery_error
            })
            .collect();
        mean(&errs)
    };
    let dp: Vec<f64> = [1e-3, 1e-2, 1e-1]
        .iter()
        .map(|&noise| run(&|g, s| dp_perturb(g, noise, &mut stream_rng(s, 9)).unwrap()))
        .collect();
    assert!(dp.windows(2).all(|w| w[0] < w[1]), "dp {dp:?}");
    let sp: Vec<f64> = [0.5, 0.2, 0.05]
        .iter()
        .map(|&keep| run(&|g, _| sparsify(g, keep).unwrap()))
        .collect();
    assert!(sp.windows(2).all(|w| w[0] < w[1]), "sparsify {sp:?}");
}

#[test]
fn attacks_are_deterministic() {
    let t = grad_target(fedadob_mode(5.0, 1.0), 2);
    let guess = PassportGuess::Random { mean_range: 5.0, variance: 1.0 };
    let cfg = AttackConfig { iterations: 200, ..inversion_cfg(4) };
    let a = wgi_attack(&t.observed, &t.model, guess, &[4, 4], &cfg, &t.x).unwrap();
    let b = wgi_attack(&t.observed, &t.model, guess, &[4, 4], &cfg, &t.x).unwrap();
    assert_eq!(a, b);
    let c = bgi_attack(&t.observed, &t.specs, &[4, 4], &cfg, &t.x).unwrap();
    assert_eq!(c, bgi_attack(&t.observed, &t.specs, &[4, 4], &cfg, &t.x).unwrap());
}

fn blob_bottom(seed: u64) -> Model {
    let specs = [LayerSpec::Dense { inputs: 20, outputs: 32 }, LayerSpec::Relu, LayerSpec::Dense { inputs: 32, outputs: 16 }];
    Model::from_specs(&specs, &mut stream_rng(seed, 4)).unwrap()
}

fn pmc_error(bottom: &Model, aux: &Dataset, test: &Dataset, head: PmcHead) -> f64 {
    pmc_attack(bottom, Obfuscation::Plain, aux, test, head, &inversion_cfg(0))
        .unwrap()
        .recovery_error
}

/// `bottom` followed by a fixed dense map `w` (no bias).
fn append_map(bottom: &Model, w: Tensor) -> Model {
    let d = w.shape()[0];
    let mut layers: Vec<Layer> = bottom.layers().to_vec();
    layers.push(Layer::Dense(DenseLayer::new(w, Tensor::zeros(&[d])).unwrap()));
    Model::new(layers).unwrap()
}

#[test]
fn pmc_beats_chance_on_blobs() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 5 }, 540, 20, 3).unwrap();
    let aux = ds.select(&(0..40).collect::<Vec<_>>()).unwrap();
    let test = ds.select(&(40..540).collect::<Vec<_>>()).unwrap();
    let err = pmc_error(&blob_bottom(1), &aux, &test, PmcHead::default());
    assert!(err < 0.8 - 0.3, "{err}");
    let mlp = PmcHead::Mlp { hidden: 16 };
    let r = pmc_attack(&blob_bottom(1), Obfuscation::Plain, &aux, &test, mlp, &AttackConfig { iterations: 300, learning_rate: 0.1, ..inversion_cfg(0) });
    assert!(r.unwrap().recovery_error < 0.8);
}

#[test]
fn pmc_invariant_to_invertible_rescaling() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 4 }, 300, 20, 8).unwrap();
    let aux = ds.select(&(0..100).collect::<Vec<_>>()).unwrap();
    let test = ds.select(&(100..300).collect::<Vec<_>>()).unwrap();
    let bottom = blob_bottom(2);
    let base = pmc_error(&bottom, &aux, &test, PmcHead::Linear { ridge: 0.0 });
    let mut rng = stream_rng(3, 0);
    let mut a = Tensor::randn(&[16, 16], 0.3, &mut rng);
    for i in 0..16 {
        a.data_mut()[i * 16 + i] += 2.0;
    }
    let mixed = pmc_error(&append_map(&bottom, a), &aux, &test, PmcHead::Linear { ridge: 0.0 });
    assert_eq!(base, mixed);
    // The relative ridge is invariant to a global scale.
    let scaled = Tensor::new(vec![16, 16], (0..256).map(|k| if k % 17 == 0 { 7.5 } else { 0.0 }).collect()).unwrap();
    assert_eq!(
        pmc_error(&bottom, &aux, &test, PmcHead::default()),
        pmc_error(&append_map(&bottom, scaled), &aux, &test, PmcHead::default())
    );
}

#[test]
fn pmc_on_its_own_aux_set_is_exact_when_underdetermined() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 4 }, 12, 20, 9).unwrap();
    let err = pmc_error(&blob_bottom(3), &ds, &ds.select(&[0, 5, 7]).unwrap(), PmcHead::Linear { ridge: 0.0 });
    assert_eq!(err, 0.0);
}

#[test]
fn pmc_needs_one_aux_sample_per_class() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 5 }, 50, 20, 1).unwrap();
    let aux = ds.select(&[0, 1, 2, 3]).unwrap();
    let r = pmc_attack(&blob_bottom(0), Obfuscation::Plain, &aux, &ds, PmcHead::default(), &inversion_cfg(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

/// Binary split-learning gradients: positives push along `+u` with ten
/// times the magnitude of negatives, which push along `-u`.
fn constructed_grads(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = stream_rng(seed, 11);
    let u = Tensor::randn(&[8], 1.0, &mut rng);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let pos = i % 3 == 0;
        let scale = if pos { 10.0 } else { -1.0 } * rng.random_range(0.5..1.5);
        let noise = Tensor::randn(&[8], 0.3, &mut rng);
        data.extend(u.data().iter().zip(noise.data()).map(|(a, b)| scale * (a + b)));
        labels.push(usize::from(pos));
    }
    (Tensor::new(vec![n, 8], data).unwrap(), labels)
}

#[test]
fn norm_and_direction_scores_separate_constructed_case() {
    let (g, labels) = constructed_grads(90, 1);
    let ns = score_recovery_error(&ns_attack(&g).unwrap(), &labels).unwrap();
    assert!(ns <= 0.05, "ns {ns}");
    let reference = g.row(0).to_vec();
    let ds = score_recovery_error(&ds_attack(&g, &reference).unwrap(), &labels).unwrap();
    assert!(ds <= 0.05, "ds {ds}");
}

#[test]
fn identical_gradients_score_at_chance() {
    let g = Tensor::new(vec![4, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
    let labels = [0, 1, 1, 0];
    assert_eq!(score_recovery_error(&ns_attack(&g).unwrap(), &labels).unwrap(), 0.5);
    assert_eq!(score_recovery_error(&ds_attack(&g, &[1.0, 0.0]).unwrap(), &labels).unwrap(), 0.5);
    assert!(matches!(ds_attack(&g, &[0.0, 0.0]), Err(Error::Argument(_))));
}
