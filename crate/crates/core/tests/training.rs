use bayes_tdnn::bayes::{DrawSite, Quantity};
use bayes_tdnn::criterion::build_denominator_graph;
use bayes_tdnn::data::{generate, Corpus, CorpusSpec};
use bayes_tdnn::tdnn::{InitConfig, LayerSpec, TdnnStack, Topology, UncertaintyMode};
use bayes_tdnn::trainer::{
    evaluate, frame_accuracy, kl_scale, metrics_csv, minibatches, train, KlGradient, TrainConfig, Trainer,
};

fn corpus(utts: usize, seed: u64) -> Corpus {
    generate(&CorpusSpec::toy(4, 6, 2.0, utts, seed)).unwrap()
}

fn small_topology(input: usize, labels: usize) -> Topology {
    Topology {
        input_dim: input,
        labels,
        layers: vec![
            LayerSpec::new(&[-1, 0, 1], 12, Some(6)).unwrap(),
            LayerSpec::new(&[-2, 0, 2], 12, Some(6)).unwrap(),
        ],
    }
}

fn stack_for(c: &Corpus, seed: u64) -> TdnnStack {
    TdnnStack::new(small_topology(c.feature_dim, c.labels), &InitConfig { seed, prior_sigma: 0.25 }).unwrap()
}

fn cfg(mode: UncertaintyMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        bayes_layers: vec![1],
        epochs,
        batch_frames: 128,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn plain_model_has_zero_kl() {
    let c = corpus(40, 1);
    let out = train(stack_for(&c, 1), &c, &cfg(UncertaintyMode::Tdnn, 2)).unwrap();
    assert!(out.metrics.iter().all(|m| m.kl_total == 0.0));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let c = corpus(30, 2);
    for mode in [UncertaintyMode::Bayes, UncertaintyMode::Variational] {
        let mut config = TrainConfig {
            lr: 0.0,
            constraint_every: 1_000_000,
            ..cfg(mode, 1)
        };
        config.mode = mode;
        let init = TdnnStack::new(
            config.training_topology(small_topology(c.feature_dim, c.labels)).unwrap(),
            &InitConfig { seed: 2, prior_sigma: 0.25 },
        )
        .unwrap();
        let out = train(init.clone(), &c, &config).unwrap();
        assert_eq!(out.checkpoint.stack, init, "{mode}");
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let c = corpus(40, 4);
    for mode in [UncertaintyMode::Bayes, UncertaintyMode::Variational, UncertaintyMode::BayesDropout] {
        let run = |workers| {
            let config = TrainConfig { workers, ..cfg(mode, 2) };
            let stack = TdnnStack::new(
                config.training_topology(small_topology(c.feature_dim, c.labels)).unwrap(),
                &InitConfig { seed: 4, prior_sigma: 0.25 },
            )
            .unwrap();
            let out = train(stack, &c, &config).unwrap();
            (out.checkpoint.to_bytes(), metrics_csv(&out.metrics))
        };
        let (a, b) = (run(1), run(3));
        assert!(a.0 == b.0, "{mode} checkpoints differ");
        assert_eq!(a.1, b.1, "{mode}");
    }
}

#[test]
fn breakdown_terms_combine_to_total() {
    let c = corpus(30, 5);
    let config = cfg(UncertaintyMode::Bayes, 1);
    let stack = TdnnStack::new(
        config.training_topology(small_topology(c.feature_dim, c.labels)).unwrap(),
        &InitConfig { seed: 5, prior_sigma: 0.25 },
    )
    .unwrap();
    let t = Trainer::new(stack.clone(), config.clone(), c.bigram.clone(), c.train_frames(), 0).unwrap();
    let batch: Vec<_> = c.train.iter().take(3).collect();
    let draws = vec![stack.draw(t.noise(), 0, 0)];
    let crit = bayes_tdnn::criterion::CriterionConfig {
        l2_weight: 0.02,
        ..config.criterion
    };
    let e = |s: f64| {
        evaluate(&stack, &batch, &c.bigram, t.denominator(), &draws, t.noise(), 0, &crit, s, KlGradient::Included)
            .unwrap()
            .breakdown
    };
    let b = e(0.3);
    let expect = b.mmi_term - b.kl_total() + crit.f_smooth_lambda * b.ce_term - crit.l2_weight * b.l2_term;
    assert!((b.total - expect).abs() < 1e-9 * b.total.abs().max(1.0));
    assert!(b.kl_total() > 0.0);
    // the parameter KL is linear in its scale
    let b2 = e(0.6);
    assert!((b2.kl_total() - 2.0 * b.kl_total()).abs() < 1e-9 * b.kl_total());
}

#[test]
fn kl_scale_is_batch_share_of_frames() {
    assert_eq!(kl_scale(250, 1000), 0.25);
    assert_eq!(kl_scale(1000, 1000), 1.0);
}

#[test]
fn minibatches_cover_every_utterance_once() {
    let c = corpus(50, 6);
    let batches = minibatches(&c.train, 200, 1, 0);
    let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..c.train.len()).collect::<Vec<_>>());
    assert_ne!(batches, minibatches(&c.train, 200, 1, 1));
    assert_eq!(batches, minibatches(&c.train, 200, 1, 0));
}

#[test]
fn uncertainty_placement_draws_once_per_layer() {
    let c = corpus(30, 7);
    let deep = Topology {
        input_dim: c.feature_dim,
        labels: c.labels,
        layers: (0..9).map(|_| LayerSpec::new(&[-1, 0, 1], 8, Some(4)).unwrap()).collect(),
    };
    let placements: Vec<Vec<usize>> = vec![vec![1], vec![1, 2], (1..=5).collect(), (1..=8).collect(), (1..=9).collect()];
    for layers in placements {
        let config = TrainConfig {
            bayes_layers: layers.clone(),
            ..cfg(UncertaintyMode::Bayes, 1)
        };
        let topo = config.training_topology(deep.clone()).unwrap();
        let stack = TdnnStack::new(topo, &InitConfig { seed: 7, prior_sigma: 0.25 }).unwrap();
        let mut t = Trainer::new(stack, config, c.bigram.clone(), c.train_frames(), 0).unwrap();
        let batch: Vec<_> = c.train.iter().take(2).collect();
        t.train_step(&batch, 0.01).unwrap();
        let counts = t.noise().draws_at_step(0);
        for l in 0..9 {
            let expected = u64::from(layers.contains(&(l + 1)));
            assert_eq!(counts.get(&DrawSite::new(l, Quantity::Weight)).copied().unwrap_or(0), expected, "{layers:?} layer {l}");
        }
    }
    let bad = TrainConfig {
        bayes_layers: vec![10],
        ..cfg(UncertaintyMode::Bayes, 1)
    };
    assert!(bad.training_topology(deep).is_err());
}

#[test]
fn well_separated_labels_are_learned_in_one_epoch() {
    let c = generate(&CorpusSpec::toy(2, 8, 10.0, 1000, 11)).unwrap();
    let config = TrainConfig {
        lr: 0.01,
        epochs: 1,
        ..TrainConfig::default()
    };
    let stack = TdnnStack::new(Topology::desk(8, 2), &InitConfig { seed: 11, prior_sigma: 0.25 }).unwrap();
    let out = train(stack, &c, &config).unwrap();
    let acc = frame_accuracy(&out.checkpoint.stack, &c.dev).unwrap();
    assert!(acc > 0.99, "dev frame accuracy {acc}");
}

#[test]
fn dev_error_rate_is_reported_per_epoch() {
    let c = corpus(40, 8);
    let out = train(stack_for(&c, 8), &c, &cfg(UncertaintyMode::Tdnn, 3)).unwrap();
    assert_eq!(out.metrics.len(), 3);
    let den = build_denominator_graph(&c.bigram).unwrap();
    let last = bayes_tdnn::trainer::error_rate(&out.checkpoint.stack, &c.dev, &den, 1.0).unwrap();
    assert_eq!(out.metrics[2].dev_ler, last);
    assert!(out.metrics.windows(2).all(|w| w[0].step < w[1].step));
}
