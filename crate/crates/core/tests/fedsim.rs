use adob_core::fedsim::{
    audit_log, run_hfl, run_vfl, stream_rng, train_centralized, HflClient, HflConfig, PassportMode, VflConfig,
};
use adob_core::harness::data::{gen_synthetic, vertical_split, SyntheticKind};
use adob_core::metrics::accuracy;
use adob_core::model::{Layer, LayerSpec, Model};
use adob_core::numcore::{SgdConfig, Tensor};
use adob_core::passport::{Obfuscation, RefreshPolicy};

fn sgd() -> SgdConfig {
    SgdConfig { learning_rate: 0.05, weight_decay: 1e-4, momentum: 0.9, clip_norm: Some(1.0) }
}

fn concat(parts: &[&Model]) -> Model {
    let layers: Vec<Layer> = parts.iter().flat_map(|m| m.host_view().layers().to_vec()).collect();
    Model::new(layers).unwrap()
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= 1e-5, "step {i}: {x} vs {y}");
    }
}

fn random_mode() -> PassportMode {
    PassportMode::Random { mean_range: 5.0, variance: 1.0, refresh: RefreshPolicy::PerBatch }
}

fn hfl_config(clients: usize, passport: PassportMode) -> HflConfig {
    HflConfig {
        clients,
        rounds: 3,
        local_epochs: 2,
        batch_size: 16,
        sgd: sgd(),
        bottom: vec![LayerSpec::PassportDense { inputs: 8, outputs: 16, passport_len: 2 }, LayerSpec::Relu],
        top: vec![LayerSpec::Dense { inputs: 16, outputs: 3 }],
        passport,
        defense: Default::default(),
        seed: 4,
        keep_messages: true,
    }
}

fn vfl_config(parties: usize, passport: PassportMode) -> VflConfig {
    let width = 8 / parties;
    VflConfig {
        epochs: 4,
        batch_size: 16,
        sgd: sgd(),
        passive_bottoms: vec![
            vec![LayerSpec::PassportDense { inputs: width, outputs: 16, passport_len: 2 }, LayerSpec::Relu];
            parties
        ],
        top: vec![
            LayerSpec::PassportDense { inputs: 16, outputs: 16, passport_len: 2 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 16, outputs: 3 },
        ],
        passive_passport: passport,
        active_passport: passport,
        defense: Default::default(),
        seed: 6,
        keep_messages: true,
    }
}

#[test]
fn single_client_passthrough_hfl_matches_centralized() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 3 }, 96, 8, 1).unwrap();
    let cfg = hfl_config(1, PassportMode::Passthrough);
    let out = run_hfl(&cfg, &ds, &ds).unwrap();

    let (top, bottoms) = cfg.initial_models().unwrap();
    let mut model = concat(&[&bottoms[0], &top]);
    let mut shuffle = HflClient::shuffle_rng(cfg.seed, 0);
    let data = &out.clients[0].data;
    let losses = train_centralized(&mut model, data, cfg.rounds * cfg.local_epochs, cfg.batch_size, cfg.sgd, &mut shuffle).unwrap();
    assert_close(&out.step_losses[0], &losses);
}

#[test]
fn single_party_passthrough_vfl_matches_centralized() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 3 }, 96, 8, 2).unwrap();
    let shards = vertical_split(&ds, &[(0, 8)]).unwrap();
    let cfg = vfl_config(1, PassportMode::Passthrough);
    let out = run_vfl(&cfg, &shards, &shards).unwrap();

    let (bottoms, top) = cfg.initial_models().unwrap();
    let mut model = concat(&[&bottoms[0], &top]);
    let losses = train_centralized(&mut model, &ds, cfg.epochs, cfg.batch_size, cfg.sgd, &mut cfg.shuffle_rng()).unwrap();
    assert_close(&out.step_losses, &losses);
}

#[test]
fn hfl_messages_never_carry_private_state() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 3 }, 120, 8, 3).unwrap();
    let out = run_hfl(&hfl_config(2, random_mode()), &ds, &ds).unwrap();
    assert!(out.log.count() > 0);
    for c in &out.clients {
        let sampler = c.obfuscation.sampler().unwrap();
        let p = sampler.inference_passport();
        let mut secrets = vec![("features", &c.data.features), ("gamma passport", &p.gamma.values), ("beta passport", &p.beta.values)];
        let params = c.bottom.params();
        secrets.extend(params.iter().map(|t| ("bottom parameter", *t)));
        audit_log(&out.log, &secrets).unwrap();
    }
}

#[test]
fn vfl_messages_never_carry_private_state() {
    let ds = gen_synthetic(SyntheticKind::BinaryVfl, 120, 8, 4).unwrap();
    let shards = vertical_split(&ds, &[(0, 4), (4, 8)]).unwrap();
    let mut cfg = vfl_config(2, random_mode());
    cfg.top.pop();
    cfg.top.push(LayerSpec::Dense { inputs: 16, outputs: 2 });
    let out = run_vfl(&cfg, &shards, &shards).unwrap();
    let labels = Tensor::vector(out.active.labels.iter().map(|&l| l as f64).collect());
    for p in &out.passives {
        let pass = p.obfuscation.sampler().unwrap().inference_passport();
        let mut secrets = vec![
            ("features", &p.features),
            ("labels", &labels),
            ("gamma passport", &pass.gamma.values),
            ("beta passport", &pass.beta.values),
        ];
        let params = p.bottom.params();
        secrets.extend(params.iter().map(|t| ("bottom parameter", *t)));
        audit_log(&out.log, &secrets).unwrap();
    }
}

#[test]
fn passported_vfl_learns_and_is_reproducible() {
    let ds = gen_synthetic(SyntheticKind::Blobs { classes: 3 }, 150, 8, 5).unwrap();
    let shards = vertical_split(&ds, &[(0, 4), (4, 8)]).unwrap();
    let cfg = VflConfig { epochs: 30, ..vfl_config(2, random_mode()) };
    let a = run_vfl(&cfg, &shards, &shards).unwrap();
    let b = run_vfl(&cfg, &shards, &shards).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert!(a.final_test_accuracy() > 0.9, "{}", a.final_test_accuracy());
}

#[test]
fn mlp_separates_linearly_separable_data() {
    let ds = gen_synthetic(SyntheticKind::LinearlySeparable, 200, 2, 6).unwrap();
    let specs = [LayerSpec::Dense { inputs: 2, outputs: 16 }, LayerSpec::Relu, LayerSpec::Dense { inputs: 16, outputs: 2 }];
    let mut model = Model::from_specs(&specs, &mut stream_rng(6, 1)).unwrap();
    let mut shuffle = stream_rng(6, 2);
    let sgd = SgdConfig { learning_rate: 0.1, weight_decay: 0.0, momentum: 0.9, clip_norm: None };
    let mut steps = 0;
    let mut acc = 0.0;
    while steps < 500 && acc < 1.0 {
        steps += train_centralized(&mut model, &ds, 1, 20, sgd, &mut shuffle).unwrap().len();
        acc = accuracy(&model.predict(&ds.features, Obfuscation::Plain).unwrap(), &ds.labels).unwrap();
    }
    assert_eq!(acc, 1.0, "after {steps} steps");
}
