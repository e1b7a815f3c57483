//! Minibatch ELBO ascent with momentum SGD, prior bootstrapping, cross-domain
//! adaptation and checkpoints.

mod adapt;
mod checkpoint;
mod objective;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bayes::{kl_proximal_step, NoiseStream, ParamBlock};
use crate::criterion::{build_denominator_graph, Bigram, CriterionConfig, ElboBreakdown, SequenceGraph};
use crate::data::{Corpus, Utterance};
use crate::decode::{label_error_rate, viterbi_decode, ErrorCounts};
use crate::error::{Error, Result};
use crate::grad::DenseMatrix;
use crate::tdnn::{TdnnStack, Topology, UncertaintyMode};

pub use adapt::{adapt, bayes_adapt_init, bootstrap_prior, AdaptConfig, AdaptStrategy, ReinitTarget};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use objective::{evaluate, sequence_key, Evaluation, KlGradient};

/// How the KL term of Gaussian blocks enters each update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlUpdate {
    /// Closed-form proximal step after the gradient step.
    Implicit,
    /// Analytic KL gradient added to the data gradient.
    Explicit,
}

impl KlUpdate {
    pub fn as_str(self) -> &'static str {
        match self {
            KlUpdate::Implicit => "implicit",
            KlUpdate::Explicit => "explicit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(KlUpdate::Implicit),
            "explicit" => Ok(KlUpdate::Explicit),
            other => Err(Error::Config(format!("unknown kl_update `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: UncertaintyMode,
    /// One-based indices of the layers carrying `mode`.
    pub bayes_layers: Vec<usize>,
    pub latent_dim: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Target frame count of one minibatch.
    pub batch_frames: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub criterion: CriterionConfig,
    pub prior_sigma: f64,
    /// Global gradient-norm bound after per-frame normalization.
    pub clip_norm: f64,
    /// Steps between semi-orthogonal projections.
    pub constraint_every: u64,
    pub kl_update: KlUpdate,
    /// Worker threads for per-sequence passes; 0 uses the global pool.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: UncertaintyMode::Tdnn,
            bayes_layers: vec![1],
            latent_dim: 4,
            lr: 0.01,
            lr_decay: 0.9,
            momentum: 0.9,
            epochs: 6,
            batch_frames: 256,
            mc_samples: 1,
            seed: 0,
            criterion: CriterionConfig::default(),
            prior_sigma: 0.25,
            clip_norm: 5.0,
            constraint_every: 4,
            kl_update: KlUpdate::Implicit,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.criterion.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0,1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.batch_frames == 0 {
            return bad("batch_frames must be positive".into());
        }
        if !(self.prior_sigma > 0.0 && self.prior_sigma.is_finite()) {
            return bad(format!("prior_sigma must be positive, got {}", self.prior_sigma));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.constraint_every == 0 {
            return bad("constraint_every must be positive".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.bayes_layers.iter().any(|&l| l == 0) {
            return bad("bayes_layers are one-based".into());
        }
        Ok(())
    }

    /// `base` with `mode` placed on `bayes_layers`.
    pub fn training_topology(&self, base: Topology) -> Result<Topology> {
        self.validate()?;
        if self.mode == UncertaintyMode::Tdnn {
            return Ok(base);
        }
        let n = base.layers.len();
        if let Some(&l) = self.bayes_layers.iter().find(|&&l| l > n) {
            return Err(Error::Config(format!(
                "bayes_layers entry {l} exceeds the {n} layers of the topology"
            )));
        }
        let zero_based: Vec<usize> = self.bayes_layers.iter().map(|l| l - 1).collect();
        base.with_mode(&zero_based, self.mode, Some(self.latent_dim))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Per-step KL weight: the minibatch's share of the training frames.
pub fn kl_scale(batch_frames: usize, total_frames: usize) -> f64 {
    batch_frames as f64 / total_frames as f64
}

/// Utterance indices grouped into consecutive minibatches of at least `batch_frames`
/// frames (the last may be shorter), after a shuffle seeded by `(seed, epoch)`.
pub fn minibatches(utts: &[Utterance], batch_frames: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut frames = 0;
    for i in order {
        cur.push(i);
        frames += utts[i].frames();
        if frames >= batch_frames {
            out.push(std::mem::take(&mut cur));
            frames = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// One row of the per-epoch metrics file; loss fields are means over the epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub mmi: f64,
    pub kl_total: f64,
    pub ce: f64,
    pub l2: f64,
    pub total: f64,
    pub dev_ler: f64,
}

pub const METRICS_HEADER: &str = "step,mmi,kl_total,ce,l2,total,dev_ler";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.mmi, r.kl_total, r.ce, r.l2, r.total, r.dev_ler
        )
        .expect("write to string");
    }
    out
}

fn with_pool<T: Send>(pool: Option<&rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn build_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers == 0 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Per-utterance error counts of Viterbi decoding at the posterior mean.
pub fn decode_errors(stack: &TdnnStack, utts: &[Utterance], den: &SequenceGraph, k: f64) -> Result<Vec<ErrorCounts>> {
    let model = stack.collapse();
    utts.par_iter()
        .map(|u| {
            let scores = model.forward_eval(&u.features)?;
            let hyp = viterbi_decode(den, &scores, k)?;
            label_error_rate(&u.transcript(), &hyp.labels)
        })
        .collect()
}

/// Corpus-level label error rate: total errors over total reference length.
pub fn error_rate(stack: &TdnnStack, utts: &[Utterance], den: &SequenceGraph, k: f64) -> Result<f64> {
    let counts = decode_errors(stack, utts, den, k)?;
    let (e, n) = counts
        .iter()
        .fold((0, 0), |(e, n), c| (e + c.errors(), n + c.ref_len));
    Ok(if n == 0 { 0.0 } else { e as f64 / n as f64 })
}

/// Fraction of frames whose highest posterior-mean score is the aligned label.
pub fn frame_accuracy(stack: &TdnnStack, utts: &[Utterance]) -> Result<f64> {
    let model = stack.collapse();
    let mut hit = 0;
    let mut total = 0;
    for u in utts {
        let best = model.forward_eval(&u.features)?.row_argmax();
        hit += best.iter().zip(&u.alignment).filter(|(a, b)| a == b).count();
        total += u.frames();
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Mutable training state around one model.
pub struct Trainer {
    pub stack: TdnnStack,
    pub step: u64,
    cfg: TrainConfig,
    noise: NoiseStream,
    bigram: Bigram,
    den: SequenceGraph,
    total_frames: usize,
    velocity: BTreeMap<String, DenseMatrix>,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    /// `total_frames` is the frame count of the training set that the KL is spread over.
    pub fn new(stack: TdnnStack, cfg: TrainConfig, bigram: Bigram, total_frames: usize, step: u64) -> Result<Self> {
        cfg.validate()?;
        if total_frames == 0 {
            return Err(Error::Config("training set has no frames".into()));
        }
        if bigram.labels() != stack.labels() {
            return Err(Error::Config(format!(
                "bigram has {} labels but the model has {}",
                bigram.labels(),
                stack.labels()
            )));
        }
        let den = build_denominator_graph(&bigram)?;
        let pool = build_pool(cfg.workers)?;
        Ok(Self {
            stack,
            step,
            noise: NoiseStream::new(cfg.seed),
            cfg,
            bigram,
            den,
            total_frames,
            velocity: BTreeMap::new(),
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn noise(&self) -> &NoiseStream {
        &self.noise
    }

    pub fn denominator(&self) -> &SequenceGraph {
        &self.den
    }

    /// One ascent step on `batch` with learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&Utterance], lr: f64) -> Result<ElboBreakdown> {
        let frames: usize = batch.iter().map(|u| u.frames()).sum();
        let scale = kl_scale(frames, self.total_frames);
        let draws: Vec<_> = (0..self.cfg.mc_samples as u32)
            .map(|d| self.stack.draw(&self.noise, self.step, d))
            .collect();
        let kl_grad = match self.cfg.kl_update {
            KlUpdate::Explicit => KlGradient::Included,
            KlUpdate::Implicit => KlGradient::Omitted,
        };
        let eval = with_pool(self.pool.as_ref(), || {
            evaluate(
                &self.stack,
                batch,
                &self.bigram,
                &self.den,
                &draws,
                &self.noise,
                self.step,
                &self.cfg.criterion,
                scale,
                kl_grad,
            )
        })?;
        let mut grads = eval.grads;
        grads.scale(1.0 / frames.max(1) as f64);
        let norm = grads.squared_norm().sqrt();
        if norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        let momentum = self.cfg.momentum;
        for (name, param) in self.stack.trainable_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| DenseMatrix::zeros(g.rows(), g.cols()));
            *v = v.zip_with(g, "momentum", |v, g| momentum * v + lr * g)?;
            param.add_assign(v)?;
        }
        if self.cfg.kl_update == KlUpdate::Implicit {
            let weight = scale / frames.max(1) as f64;
            for layer in &mut self.stack.layers {
                let keep = layer.dropout.map_or(1.0, |c| c.keep);
                if let ParamBlock::Gaussian(q) = &mut layer.weight {
                    kl_proximal_step(q, weight * keep, lr);
                }
                if let Some(ParamBlock::Gaussian(q)) = layer.gp.as_mut().map(|g| &mut g.lambda) {
                    kl_proximal_step(q, weight, lr);
                }
            }
        }
        self.step += 1;
        if self.step % self.cfg.constraint_every == 0 {
            self.stack.apply_constraints()?;
        }
        Ok(eval.breakdown)
    }

    /// Trains one epoch over `train` and scores `dev` afterwards.
    pub fn run_epoch(&mut self, train: &[Utterance], dev: &[Utterance], epoch: usize) -> Result<MetricsRow> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let lr = self.cfg.lr_at(epoch);
        let batches = minibatches(train, self.cfg.batch_frames, self.cfg.seed, epoch);
        let mut sums = [0.0; 5];
        for idx in &batches {
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
            let b = self.train_step(&batch, lr)?;
            for (s, v) in sums
                .iter_mut()
                .zip([b.mmi_term, b.kl_total(), b.ce_term, b.l2_term, b.total])
            {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        let dev_ler = if dev.is_empty() {
            f64::NAN
        } else {
            let (stack, den, k) = (&self.stack, &self.den, self.cfg.criterion.acoustic_scale);
            with_pool(self.pool.as_ref(), || error_rate(stack, dev, den, k))?
        };
        Ok(MetricsRow {
            step: self.step,
            mmi: sums[0] / n,
            kl_total: sums[1] / n,
            ce: sums[2] / n,
            l2: sums[3] / n,
            total: sums[4] / n,
            dev_ler,
        })
    }

    /// Runs epochs `from..to` of the schedule.
    pub fn run_epochs(&mut self, corpus: &Corpus, from: usize, to: usize) -> Result<Vec<MetricsRow>> {
        (from..to)
            .map(|e| self.run_epoch(&corpus.train, &corpus.dev, e))
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stack: self.stack.clone(),
            noise_seed: self.cfg.seed,
            step: self.step,
            provenance: None,
        }
    }
}

/// Result of a complete training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Trains `stack` on `corpus` for `cfg.epochs` epochs.
pub fn train(stack: TdnnStack, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(stack, cfg.clone(), corpus.bigram.clone(), corpus.train_frames(), 0)?;
    let metrics = t.run_epochs(corpus, 0, cfg.epochs)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        metrics,
    })
}

/// Deterministic baseline run that also returns the model after half of its epochs.
pub fn train_with_midpoint(stack: TdnnStack, corpus: &Corpus, cfg: &TrainConfig) -> Result<(TrainOutcome, Checkpoint)> {
    let mut t = Trainer::new(stack, cfg.clone(), corpus.bigram.clone(), corpus.train_frames(), 0)?;
    let half = cfg.epochs / 2;
    let mut metrics = t.run_epochs(corpus, 0, half)?;
    let mid = t.checkpoint();
    metrics.extend(t.run_epochs(corpus, half, cfg.epochs)?);
    Ok((
        TrainOutcome {
            checkpoint: t.checkpoint(),
            metrics,
        },
        mid,
    ))
}

/// Result of [`train_bootstrapped`].
#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    /// Deterministic baseline after all of its epochs.
    pub baseline: TrainOutcome,
    /// Baseline after half of its epochs.
    pub half_trained: Checkpoint,
    /// Uncertainty model trained over the second half of the schedule.
    pub model: TrainOutcome,
}

/// Trains a deterministic baseline for `cfg.epochs` epochs, initializes `cfg.mode` with
/// [`bootstrap_prior`] from its half-way and final models, and runs the remaining
/// `cfg.epochs - cfg.epochs / 2` epochs of the schedule on the initialized model.
///
/// `stack` must be deterministic; it is the baseline's initial model.
pub fn train_bootstrapped(stack: TdnnStack, corpus: &Corpus, cfg: &TrainConfig) -> Result<BootstrapOutcome> {
    if stack.is_stochastic() || stack.layers.iter().any(|l| l.spec.mode != UncertaintyMode::Tdnn) {
        return Err(Error::Config("the bootstrap baseline must be a plain tdnn model".into()));
    }
    let base_cfg = TrainConfig {
        mode: UncertaintyMode::Tdnn,
        ..cfg.clone()
    };
    let (baseline, half_trained) = train_with_midpoint(stack, corpus, &base_cfg)?;
    let model = train_from_baseline(&baseline.checkpoint, &half_trained, corpus, cfg)?;
    Ok(BootstrapOutcome {
        baseline,
        half_trained,
        model,
    })
}

/// Uncertainty training over the second half of the schedule, initialized by
/// [`bootstrap_prior`] from a converged baseline and its half-way model.
pub fn train_from_baseline(converged: &Checkpoint, half_trained: &Checkpoint, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = bootstrap_prior(&converged.stack, &half_trained.stack, cfg)?;
    let mut t = Trainer::new(init, cfg.clone(), corpus.bigram.clone(), corpus.train_frames(), half_trained.step)?;
    let metrics = t.run_epochs(corpus, cfg.epochs / 2, cfg.epochs)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        metrics,
    })
}
