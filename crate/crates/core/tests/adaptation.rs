use bayes_tdnn::bayes::ParamBlock;
use bayes_tdnn::data::{generate, Corpus, CorpusSpec, DomainShift};
use bayes_tdnn::tdnn::{InitConfig, LayerSpec, TdnnStack, Topology, UncertaintyMode};
use bayes_tdnn::trainer::{
    adapt, bayes_adapt_init, bootstrap_prior, train, AdaptConfig, AdaptStrategy, Checkpoint, TrainConfig,
};
use bayes_tdnn::Error;

fn topology(hidden: usize) -> Topology {
    Topology {
        input_dim: 6,
        labels: 4,
        layers: vec![
            LayerSpec::new(&[-1, 0, 1], hidden, Some(5)).unwrap(),
            LayerSpec::new(&[-1, 0, 1], 10, Some(5)).unwrap(),
        ],
    }
}

fn plain(seed: u64) -> TdnnStack {
    TdnnStack::new(topology(10), &InitConfig { seed, prior_sigma: 0.25 }).unwrap()
}

fn bayes_cfg(prior_sigma: f64) -> TrainConfig {
    TrainConfig {
        mode: UncertaintyMode::Bayes,
        prior_sigma,
        ..TrainConfig::default()
    }
}

fn pair(seed: u64) -> (Corpus, Corpus) {
    let source = generate(&CorpusSpec::toy(4, 6, 2.0, 50, seed)).unwrap();
    let mut t = CorpusSpec::toy(4, 6, 2.0, 40, seed + 1);
    t.domain_shift = Some(DomainShift::random(6, 0.5, 1.0, seed));
    (source, generate(&t).unwrap())
}

fn source_checkpoint(seed: u64, source: &Corpus) -> Checkpoint {
    let cfg = TrainConfig {
        epochs: 2,
        batch_frames: 128,
        seed,
        ..TrainConfig::default()
    };
    train(plain(seed), source, &cfg).unwrap().checkpoint
}

#[test]
fn bootstrap_from_identical_models_has_zero_kl() {
    let m = plain(1);
    let s = bootstrap_prior(&m, &m, &bayes_cfg(0.25)).unwrap();
    assert_eq!(s.parameter_kl(), vec![0.0, 0.0]);
    assert!(s.layers[0].weight.is_gaussian());
}

#[test]
fn bootstrap_kl_of_unit_mean_shift() {
    let half = plain(2);
    let mut conv = half.clone();
    let shifted = match &conv.layers[0].weight {
        ParamBlock::Fixed(w) => w.map(|v| v + 1.0),
        ParamBlock::Gaussian(_) => unreachable!("plain model"),
    };
    let n = shifted.len() as f64;
    conv.layers[0].weight = ParamBlock::Fixed(shifted);
    let s = bootstrap_prior(&conv, &half, &bayes_cfg(1.0)).unwrap();
    let kl = s.parameter_kl()[0];
    assert!((kl - 0.5 * n).abs() < 1e-9 * n, "kl {kl} for {n} weights");
}

#[test]
fn bootstrap_for_plain_mode_copies_the_half_trained_model() {
    let (conv, half) = (plain(3), plain(4));
    let cfg = TrainConfig::default();
    assert_eq!(bootstrap_prior(&conv, &half, &cfg).unwrap(), half);
}

#[test]
fn bootstrap_rejects_mismatched_topologies() {
    let other = TdnnStack::new(topology(12), &InitConfig { seed: 5, prior_sigma: 0.25 }).unwrap();
    match bootstrap_prior(&plain(5), &other, &bayes_cfg(0.25)) {
        Err(Error::TopologyMismatch { layers }) => assert_eq!(layers, vec!["layer1".to_string()]),
        other => panic!("expected a mismatch, got {other:?}"),
    }
}

#[test]
fn fine_tune_at_zero_rate_only_replaces_the_output_layer() {
    let (source, target) = pair(10);
    let src = source_checkpoint(10, &source);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        constraint_every: 1_000_000,
        seed: 10,
        ..TrainConfig::default()
    };
    let (out, metrics) = adapt(&src, &target, &AdaptConfig::default(), &cfg).unwrap();
    assert_eq!(out.stack.layers, src.stack.layers);
    assert_ne!(out.stack.output_w, src.stack.output_w);
    assert_eq!(metrics.len(), 1);
    assert_eq!(out.provenance, Some(src.content_hash()));
}

#[test]
fn bayes_adapt_starts_at_the_prior() {
    let m = plain(6);
    let init = bayes_adapt_init(&m, &AdaptConfig::default(), &bayes_cfg(10.0)).unwrap();
    assert_eq!(init.parameter_kl()[0], 0.0);
    let q = init.layers[0].weight.gaussian().unwrap();
    assert_eq!(q.mu, m.layers[0].mean_weight());
    assert!(q.sigmas().iter().all(|&s| (s - 10.0).abs() < 1e-12));
    assert_eq!(init.layers[1], m.layers[1]);
    assert_ne!(init.output_w, m.output_w);

    let capped = AdaptConfig {
        init_sigma: Some(0.1),
        ..AdaptConfig::default()
    };
    let init = bayes_adapt_init(&m, &capped, &bayes_cfg(10.0)).unwrap();
    assert!(init.parameter_kl()[0] > 0.0);
    assert!(bayes_adapt_init(&init, &capped, &bayes_cfg(10.0)).is_err());
}

#[test]
fn tiny_prior_sigma_pins_the_adapted_layer() {
    let (source, target) = pair(20);
    let src = source_checkpoint(20, &source);
    let acfg = AdaptConfig {
        strategy: AdaptStrategy::BayesAdapt,
        ..AdaptConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_frames: 128,
        seed: 20,
        prior_sigma: 1e-6,
        ..TrainConfig::default()
    };
    let (out, metrics) = adapt(&src, &target, &acfg, &cfg).unwrap();
    assert_eq!(metrics.len(), 4);
    let q = out.stack.layers[0].weight.gaussian().unwrap();
    assert!(q.mu.max_abs_diff(&q.prior_mu) < 1e-3);
    assert_eq!(out.stack.layers[0].spec.mode, UncertaintyMode::Bayes);
    assert_eq!(out.provenance, Some(src.content_hash()));
}

#[test]
fn adapt_rejects_a_target_with_other_labels() {
    let (source, _) = pair(30);
    let src = source_checkpoint(30, &source);
    let other = generate(&CorpusSpec::toy(3, 6, 2.0, 40, 31)).unwrap();
    assert!(matches!(
        adapt(&src, &other, &AdaptConfig::default(), &TrainConfig::default()),
        Err(Error::TopologyMismatch { .. })
    ));
}
