//! Numerical oracle suites: objective gradients against finite differences, closed-form
//! KL against quadrature, forward–backward against path enumeration, and the exact
//! reductions between uncertainty modes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bayes::{
    kl_bayes_dropout, kl_gaussian, BayesDropoutConfig, GaussianVariational, GpBasisSet, LatentNoise,
    NoiseStream, ParamBlock,
};
use crate::criterion::{
    build_denominator_graph, build_numerator_graph, forward_backward, mmi_loss_and_grad, Arc, Bigram,
    CriterionConfig, SequenceGraph,
};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::grad::{logsumexp, DenseMatrix, GradTape, Gradients};
use crate::tdnn::{InitConfig, LayerDraw, LayerSpec, TdnnStack, Topology, UncertaintyMode};
use crate::trainer::{evaluate, KlGradient};

/// Relative error with a small absolute floor on the scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const SUITES: [&str; 4] = ["grad-check", "kl-check", "fb-check", "reduction-check"];

/// Runs one named suite.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let (suite, checks) = match name {
        "grad-check" => ("grad-check", grad_suite(seed)?),
        "kl-check" => ("kl-check", kl_suite(seed)),
        "fb-check" => ("fb-check", fb_suite(seed)?),
        "reduction-check" => ("reduction-check", reduction_suite(seed)?),
        other => {
            return Err(Error::Config(format!(
                "unknown suite `{other}`, expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport { suite, checks })
}

// ---------------------------------------------------------------------------
// objective gradients

pub const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub mode: UncertaintyMode,
    pub checked: usize,
    /// Arrays of the uncertain layer that received at least one probe.
    pub layer_arrays: Vec<String>,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Two-layer toy network: an uncertain factored first layer and a plain second layer.
pub fn toy_topology(mode: UncertaintyMode) -> Result<Topology> {
    let mut first = LayerSpec::new(&[-1, 0], 5, Some(4))?;
    first.mode = mode;
    if mode == UncertaintyMode::Variational {
        first.latent_dim = Some(2);
    }
    let topo = Topology {
        input_dim: 3,
        labels: 3,
        layers: vec![first, LayerSpec::new(&[0, 1], 4, None)?],
    };
    topo.validate()?;
    Ok(topo)
}

/// Random utterances with features in `[-1, 1]` and random alignments.
pub fn toy_batch(n: usize, frames: usize, input_dim: usize, labels: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Utterance {
            id: format!("probe{i}"),
            features: DenseMatrix::from_fn(frames, input_dim, |_, _| rng.random_range(-1.0..1.0)),
            alignment: (0..frames).map(|_| rng.random_range(0..labels)).collect(),
        })
        .collect()
}

fn perturb(stack: &mut TdnnStack, sd: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, sd).expect("positive sd");
    for (_, m) in stack.trainable_mut() {
        for v in m.as_mut_slice() {
            *v += normal.sample(rng);
        }
    }
}

fn nudge(stack: &mut TdnnStack, name: &str, index: usize, delta: f64) {
    for (n, m) in stack.trainable_mut() {
        if n == name {
            m.as_mut_slice()[index] += delta;
            return;
        }
    }
}

struct Probe<'a> {
    batch: Vec<&'a Utterance>,
    bigram: Bigram,
    den: SequenceGraph,
    draws: Vec<LayerDraw>,
    noise: NoiseStream,
    crit: CriterionConfig,
    kl_scale: f64,
}

impl Probe<'_> {
    fn run(&self, stack: &TdnnStack) -> Result<(f64, Gradients)> {
        let draws = vec![stack.redraw(&self.draws)?];
        let e = evaluate(
            stack,
            &self.batch,
            &self.bigram,
            &self.den,
            &draws,
            &self.noise,
            0,
            &self.crit,
            self.kl_scale,
            KlGradient::Included,
        )?;
        Ok((e.breakdown.total, e.grads))
    }
}

/// Compares the full objective gradient (frozen noise, analytic KL and an L2 term
/// included) with central differences on `params` randomly chosen entries. Every
/// trainable array of the uncertain layer gets at least one probe.
pub fn objective_gradient_check(mode: UncertaintyMode, params: usize, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = toy_topology(mode)?;
    let mut stack = TdnnStack::new(topo, &InitConfig { seed, prior_sigma: 0.5 })?;
    perturb(&mut stack, 0.1, &mut rng);
    let utts = toy_batch(2, 6, 3, 3, seed ^ 0x5eed);
    let bigram = Bigram::uniform(3);
    let den = build_denominator_graph(&bigram)?;
    let noise = NoiseStream::new(seed);
    let probe = Probe {
        batch: utts.iter().collect(),
        den,
        bigram,
        draws: stack.draw(&noise, 0, 0),
        noise,
        crit: CriterionConfig {
            acoustic_scale: 1.0,
            f_smooth_lambda: 0.1,
            l2_weight: 0.01,
        },
        kl_scale: 0.5,
    };
    let (_, grads) = probe.run(&stack)?;

    let mut entries: Vec<(String, usize)> = Vec::new();
    let mut required = Vec::new();
    for (name, m) in stack.trainable_mut() {
        let first = entries.len();
        entries.extend((0..m.len()).map(|i| (name.clone(), i)));
        if name.starts_with("layer1.") {
            required.push(rng.random_range(first..entries.len()));
        }
    }
    let mut rest: Vec<usize> = (0..entries.len()).filter(|i| !required.contains(i)).collect();
    rest.shuffle(&mut rng);
    let take = params.saturating_sub(required.len()).min(rest.len());
    let chosen: Vec<usize> = required.iter().copied().chain(rest.into_iter().take(take)).collect();

    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::new();
    for &i in &chosen {
        let (name, index) = &entries[i];
        let mut plus = stack.clone();
        nudge(&mut plus, name, *index, GRAD_STEP);
        let mut minus = stack.clone();
        nudge(&mut minus, name, *index, -GRAD_STEP);
        let numeric = (probe.run(&plus)?.0 - probe.run(&minus)?.0) / (2.0 * GRAD_STEP);
        let analytic = grads.get(name).map_or(0.0, |g| g.as_slice()[*index]);
        let err = relative_error(analytic, numeric, GRAD_FLOOR);
        if err > max_rel_err || worst.is_empty() {
            max_rel_err = max_rel_err.max(err);
            worst = format!("{name}[{index}] analytic {analytic:.9e} numeric {numeric:.9e}");
        }
    }
    let mut layer_arrays: Vec<String> = required.iter().map(|&i| entries[i].0.clone()).collect();
    layer_arrays.dedup();
    Ok(GradCheckOutcome {
        mode,
        checked: chosen.len(),
        layer_arrays,
        max_rel_err,
        worst,
    })
}

fn grad_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for mode in UncertaintyMode::ALL {
        let o = objective_gradient_check(mode, 50, seed)?;
        out.push(Check::new(
            format!("objective gradient {mode}"),
            o.checked >= 50 && o.max_rel_err <= GRAD_TOLERANCE,
            format!("{} entries, max rel err {:.2e} at {}", o.checked, o.max_rel_err, o.worst),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// KL oracles

fn normal_pdf(x: f64, mu: f64, s: f64) -> f64 {
    let z = (x - mu) / s;
    (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// `∫ q log(q / p)` for two univariate Gaussians by composite Simpson quadrature over
/// `mu ± 14 s`.
pub fn quadrature_kl(mu: f64, s: f64, prior_mu: f64, prior_sigma: f64) -> f64 {
    let n = 40_000;
    let (lo, hi) = (mu - 14.0 * s, mu + 14.0 * s);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let q = normal_pdf(x, mu, s);
        if q == 0.0 {
            return 0.0;
        }
        let z = (x - mu) / s;
        let zr = (x - prior_mu) / prior_sigma;
        // log q − log p without forming the tiny densities
        q * ((prior_sigma / s).ln() - 0.5 * z * z + 0.5 * zr * zr)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

#[derive(Debug, Clone, Copy)]
pub struct KlOutcome {
    pub cases: usize,
    pub max_quadrature_err: f64,
    pub max_self_kl: f64,
    pub max_mixture_diff: f64,
}

fn scalar_q(mu: f64, s: f64, mr: f64, sr: f64) -> GaussianVariational {
    GaussianVariational::new(DenseMatrix::filled(1, 1, mu), s, DenseMatrix::filled(1, 1, mr), sr)
        .expect("positive prior sigma")
}

fn random_q(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> GaussianVariational {
    let mu = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
    let rho = DenseMatrix::from_fn(rows, 1, |_, _| rng.random_range(-2.0..0.7));
    let pm = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
    let ps = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.1..2.0));
    GaussianVariational::from_parts(mu, rho, pm, ps).expect("consistent shapes")
}

/// Closed-form KL against quadrature on `cases` random scalar cases, `KL(q ‖ q)`, and the
/// dropout-mixture KL at `keep = 1` against the Gaussian KL.
pub fn kl_oracle_check(cases: usize, seed: u64) -> KlOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = KlOutcome {
        cases,
        max_quadrature_err: 0.0,
        max_self_kl: 0.0,
        max_mixture_diff: 0.0,
    };
    for _ in 0..cases {
        let mu = rng.random_range(-1.5..1.5);
        let s = rng.random_range(0.3..2.0);
        let mr = rng.random_range(-1.5..1.5);
        let sr = rng.random_range(0.3..2.0);
        let err = (kl_gaussian(&scalar_q(mu, s, mr, sr)) - quadrature_kl(mu, s, mr, sr)).abs();
        out.max_quadrature_err = out.max_quadrature_err.max(err);
        out.max_self_kl = out.max_self_kl.max(kl_gaussian(&scalar_q(mu, s, mu, s)).abs());

        let q = random_q(&mut rng, 3, 4);
        let cfg = BayesDropoutConfig::new(1.0, rng.random_range(0.01..1.0)).expect("valid config");
        let diff = (kl_bayes_dropout(&q, &cfg) - kl_gaussian(&q)).abs();
        out.max_mixture_diff = out.max_mixture_diff.max(diff);
    }
    out
}

fn kl_suite(seed: u64) -> Vec<Check> {
    let o = kl_oracle_check(100, seed);
    vec![
        Check::new(
            "closed form vs quadrature",
            o.max_quadrature_err <= 1e-8,
            format!("{} cases, max abs err {:.2e}", o.cases, o.max_quadrature_err),
        ),
        Check::new(
            "self divergence",
            o.max_self_kl <= 1e-12,
            format!("max |KL(q||q)| {:.2e}", o.max_self_kl),
        ),
        Check::new(
            "mixture at keep 1",
            o.max_mixture_diff <= 1e-10,
            format!("max abs diff {:.2e}", o.max_mixture_diff),
        ),
    ]
}

// ---------------------------------------------------------------------------
// forward–backward

#[derive(Debug, Clone, Copy)]
pub struct FbOutcome {
    pub cases: usize,
    pub max_total_err: f64,
    pub max_occupancy_err: f64,
    pub max_mmi_rel_err: f64,
}

/// Random connected graph: a chain through all states with a self-loop on the last
/// one, extra random arcs up to six, and one or two final states.
fn random_graph(rng: &mut ChaCha8Rng, states: usize, labels: usize) -> Result<SequenceGraph> {
    let mut arcs = Vec::new();
    let arc = |rng: &mut ChaCha8Rng, src, dst| Arc {
        src,
        dst,
        label: rng.random_range(0..labels),
        log_weight: rng.random_range(-2.0..0.5),
    };
    for s in 1..states {
        arcs.push(arc(rng, s - 1, s));
    }
    arcs.push(arc(rng, states - 1, states - 1));
    while arcs.len() < 6 && rng.random_bool(0.7) {
        let (a, b) = (rng.random_range(0..states), rng.random_range(0..states));
        arcs.push(arc(rng, a, b));
    }
    let mut finals = vec![(states - 1, rng.random_range(-1.0..0.5))];
    if states > 1 && rng.random_bool(0.3) {
        finals.push((rng.random_range(0..states - 1), rng.random_range(-1.0..0.5)));
    }
    SequenceGraph::new(states, labels, arcs, vec![0], finals)
}

/// Log path-sum and label occupancies by listing every path of `T` arcs.
pub fn enumerate_paths(graph: &SequenceGraph, scores: &DenseMatrix, k: f64) -> (f64, DenseMatrix) {
    let t_len = scores.rows();
    let mut paths: Vec<(f64, Vec<usize>)> = Vec::new();
    fn walk(
        g: &SequenceGraph,
        scores: &DenseMatrix,
        k: f64,
        state: usize,
        acc: f64,
        labels: &mut Vec<usize>,
        out: &mut Vec<(f64, Vec<usize>)>,
    ) {
        let t = labels.len();
        if t == scores.rows() {
            for &(s, w) in g.finals() {
                if s == state {
                    out.push((acc + w, labels.clone()));
                }
            }
            return;
        }
        for a in g.arcs().iter().filter(|a| a.src == state) {
            labels.push(a.label);
            walk(g, scores, k, a.dst, acc + a.log_weight + k * scores.get(t, a.label), labels, out);
            labels.pop();
        }
    }
    for &s in graph.start() {
        walk(graph, scores, k, s, 0.0, &mut Vec::new(), &mut paths);
    }
    let weights: Vec<f64> = paths.iter().map(|p| p.0).collect();
    let total = logsumexp(&weights);
    let mut occ = DenseMatrix::zeros(t_len, graph.labels());
    for (w, labels) in &paths {
        let p = (w - total).exp();
        for (t, &l) in labels.iter().enumerate() {
            occ.set(t, l, occ.get(t, l) + p);
        }
    }
    (total, occ)
}

/// Forward–backward against enumeration on `cases` random graphs with `T ≤ 6` and at
/// most three labels, plus central differences of the MMI value against its occupancy
/// gradient.
pub fn fb_enumeration_check(cases: usize, seed: u64) -> Result<FbOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FbOutcome {
        cases,
        max_total_err: 0.0,
        max_occupancy_err: 0.0,
        max_mmi_rel_err: 0.0,
    };
    let h = 1e-5;
    for _ in 0..cases {
        let labels = rng.random_range(1..=3);
        let states = rng.random_range(1..=4);
        let graph = random_graph(&mut rng, states, labels)?;
        let t_len = rng.random_range((states - 1).max(1)..=6);
        let scores = DenseMatrix::from_fn(t_len, labels, |_, _| rng.random_range(-3.0..1.0));
        let k = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.2..1.5) };
        let fb = forward_backward(&graph, &scores, k)?;
        let (total, occ) = enumerate_paths(&graph, &scores, k);
        out.max_total_err = out.max_total_err.max((fb.log_total - total).abs());
        out.max_occupancy_err = out.max_occupancy_err.max(fb.occupancy.max_abs_diff(&occ));

        let alignment: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..labels)).collect();
        let num = build_numerator_graph(&alignment, labels)?;
        let crit = CriterionConfig {
            acoustic_scale: k,
            ..CriterionConfig::default()
        };
        let (_, grad) = mmi_loss_and_grad(&num, &graph, &scores, &crit)?;
        for t in 0..t_len {
            for l in 0..labels {
                let shifted = |d: f64| {
                    let mut s = scores.clone();
                    s.set(t, l, s.get(t, l) + d);
                    mmi_loss_and_grad(&num, &graph, &s, &crit).map(|r| r.0)
                };
                let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
                let err = relative_error(grad.get(t, l), numeric, 1e-3);
                out.max_mmi_rel_err = out.max_mmi_rel_err.max(err);
            }
        }
    }
    Ok(out)
}

fn fb_suite(seed: u64) -> Result<Vec<Check>> {
    let o = fb_enumeration_check(200, seed)?;
    Ok(vec![
        Check::new(
            "log total vs enumeration",
            o.max_total_err <= 1e-10,
            format!("{} graphs, max abs err {:.2e}", o.cases, o.max_total_err),
        ),
        Check::new(
            "occupancy vs enumeration",
            o.max_occupancy_err <= 1e-10,
            format!("max abs err {:.2e}", o.max_occupancy_err),
        ),
        Check::new(
            "mmi gradient vs finite differences",
            o.max_mmi_rel_err <= 1e-5,
            format!("max rel err {:.2e}", o.max_mmi_rel_err),
        ),
    ])
}

// ---------------------------------------------------------------------------
// reductions between modes

#[derive(Debug, Clone, Copy)]
pub struct ReductionOutcome {
    /// Largest difference in objective, scores or gradients between the dropout
    /// mixture at `keep = 1` and the plain Gaussian posterior.
    pub dropout_keep_one_diff: f64,
    pub zero_sigma_bitwise: bool,
    pub relu_selection_bitwise: bool,
}

/// Scores and data gradients (seeded by `seed_grad`) of one sampled pass, with sample
/// keys renamed to their base names.
fn pass(stack: &TdnnStack, x: &DenseMatrix, draws: &[LayerDraw], seed_grad: &DenseMatrix) -> Result<(DenseMatrix, Gradients)> {
    let mut tape = GradTape::new();
    let vars = stack.forward_tape(&mut tape, x, Some(draws), LatentNoise::Mean)?;
    let scores = tape.value(vars.scores).clone();
    let raw = tape.backward(vars.scores, seed_grad.clone())?;
    let mut grads = Gradients::new();
    for (k, g) in raw.iter() {
        grads.insert(k.trim_end_matches("#sample"), g.clone());
    }
    Ok((scores, grads))
}

fn bitwise_equal(a: &DenseMatrix, b: &DenseMatrix) -> bool {
    a.shape() == b.shape() && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn same_grads(a: &Gradients, b: &Gradients, skip: &[&str]) -> bool {
    let keys = |g: &Gradients| -> Vec<String> { g.keys().filter(|k| !skip.contains(&k.as_str())).cloned().collect() };
    keys(a) == keys(b) && keys(a).iter().all(|k| bitwise_equal(a.get(k).unwrap(), b.get(k).unwrap()))
}

fn max_grad_diff(a: &Gradients, b: &Gradients) -> f64 {
    let mut d: f64 = 0.0;
    for (k, g) in a.iter() {
        d = d.max(b.get(k).map_or(f64::INFINITY, |h| g.max_abs_diff(h)));
    }
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    d
}

/// Copies every layer's linear part, mean weight and bias from `src` into `dst`.
fn copy_means(src: &TdnnStack, dst: &mut TdnnStack) {
    for (d, s) in dst.layers.iter_mut().zip(&src.layers) {
        d.linear = s.linear.clone();
        d.bias = s.bias.clone();
        d.weight = ParamBlock::Fixed(s.mean_weight());
    }
    dst.output_w = src.output_w.clone();
    dst.output_b = src.output_b.clone();
}

pub fn reduction_chain_check(seed: u64) -> Result<ReductionOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = InitConfig { seed, prior_sigma: 0.5 };
    let utts = toy_batch(2, 7, 3, 3, seed ^ 0xbd);
    let x = &utts[0].features;
    let seed_grad = DenseMatrix::from_fn(x.rows(), 3, |_, _| rng.random_range(-1.0..1.0));

    // dropout mixture with keep = 1 against the plain Gaussian posterior
    let mut bd = TdnnStack::new(toy_topology(UncertaintyMode::BayesDropout)?, &init)?;
    perturb(&mut bd, 0.1, &mut rng);
    for layer in &mut bd.layers {
        if let Some(cfg) = &mut layer.dropout {
            cfg.keep = 1.0;
        }
    }
    let mut b = bd.clone();
    b.topology.layers[0].mode = UncertaintyMode::Bayes;
    b.layers[0].spec.mode = UncertaintyMode::Bayes;
    b.layers[0].dropout = None;
    let noise = NoiseStream::new(seed);
    let bigram = Bigram::uniform(3);
    let den = build_denominator_graph(&bigram)?;
    let batch: Vec<&Utterance> = utts.iter().collect();
    let crit = CriterionConfig {
        l2_weight: 0.01,
        ..CriterionConfig::default()
    };
    let eval = |s: &TdnnStack| {
        let draws = vec![s.draw(&noise, 3, 0)];
        evaluate(s, &batch, &bigram, &den, &draws, &noise, 3, &crit, 0.5, KlGradient::Included)
    };
    let (e_bd, e_b) = (eval(&bd)?, eval(&b)?);
    let (s_bd, g_bd) = pass(&bd, x, &bd.draw(&noise, 4, 0), &seed_grad)?;
    let (s_b, g_b) = pass(&b, x, &b.draw(&noise, 4, 0), &seed_grad)?;
    let dropout_keep_one_diff = (e_bd.breakdown.total - e_b.breakdown.total)
        .abs()
        .max(max_grad_diff(&e_bd.grads, &e_b.grads))
        .max(s_bd.max_abs_diff(&s_b))
        .max(max_grad_diff(&g_bd, &g_b));

    // zero posterior sigma against the plain layer
    let mut bayes = TdnnStack::new(toy_topology(UncertaintyMode::Bayes)?, &init)?;
    perturb(&mut bayes, 0.1, &mut rng);
    let q = bayes.layers[0].weight.gaussian().expect("Bayesian first layer").clone();
    bayes.layers[0].weight = ParamBlock::Gaussian(GaussianVariational::from_parts(
        q.mu,
        DenseMatrix::filled(q.rho.rows(), 1, f64::NEG_INFINITY),
        q.prior_mu,
        q.prior_sigma,
    )?);
    let mut plain = TdnnStack::new(toy_topology(UncertaintyMode::Tdnn)?, &init)?;
    copy_means(&bayes, &mut plain);
    let (s_q, g_q) = pass(&bayes, x, &bayes.draw(&noise, 5, 0), &seed_grad)?;
    let (s_p, g_p) = pass(&plain, x, &plain.draw(&noise, 5, 0), &seed_grad)?;
    let zero_sigma_bitwise = bitwise_equal(&s_q, &s_p) && same_grads(&g_q, &g_p, &[]);

    // fixed basis coefficients selecting the ReLU
    let mut gp = TdnnStack::new(toy_topology(UncertaintyMode::Gp(crate::tdnn::GpVariant::V0))?, &init)?;
    perturb(&mut gp, 0.1, &mut rng);
    let nodes = gp.layers[0].gp.as_ref().expect("gp layer").nodes();
    gp.layers[0].gp = Some(GpBasisSet::new(
        crate::tdnn::GpVariant::V0,
        ParamBlock::Fixed(GpBasisSet::relu_selection(nodes)),
    )?);
    let mut plain = TdnnStack::new(toy_topology(UncertaintyMode::Tdnn)?, &init)?;
    copy_means(&gp, &mut plain);
    let (s_g, g_g) = pass(&gp, x, &gp.draw(&noise, 6, 0), &seed_grad)?;
    let (s_p, g_p) = pass(&plain, x, &plain.draw(&noise, 6, 0), &seed_grad)?;
    let relu_selection_bitwise = bitwise_equal(&s_g, &s_p) && same_grads(&g_g, &g_p, &["layer1.lambda"]);

    Ok(ReductionOutcome {
        dropout_keep_one_diff,
        zero_sigma_bitwise,
        relu_selection_bitwise,
    })
}

fn reduction_suite(seed: u64) -> Result<Vec<Check>> {
    let o = reduction_chain_check(seed)?;
    Ok(vec![
        Check::new(
            "dropout mixture at keep 1 equals Gaussian posterior",
            o.dropout_keep_one_diff <= 1e-10,
            format!("max abs diff {:.2e}", o.dropout_keep_one_diff),
        ),
        Check::new(
            "zero sigma equals plain layer",
            o.zero_sigma_bitwise,
            format!("bitwise {}", o.zero_sigma_bitwise),
        ),
        Check::new(
            "relu selection equals plain layer",
            o.relu_selection_bitwise,
            format!("bitwise {}", o.relu_selection_bitwise),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_of_a_single_path() {
        let arcs = vec![
            Arc { src: 0, dst: 1, label: 0, log_weight: -0.5 },
            Arc { src: 1, dst: 1, label: 1, log_weight: -0.25 },
        ];
        let g = SequenceGraph::new(2, 2, arcs, vec![0], vec![(1, 0.0)]).unwrap();
        let s = DenseMatrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        let (total, occ) = enumerate_paths(&g, &s, 1.0);
        assert!((total - (-0.5 + 0.1 - 0.25 + 0.4)).abs() < 1e-15);
        assert_eq!(occ.get(0, 0), 1.0);
        assert_eq!(occ.get(1, 1), 1.0);
    }

    #[test]
    fn quadrature_known_value() {
        assert!((quadrature_kl(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope", 0).is_err());
    }

    #[test]
    fn kl_and_fb_suites_pass() {
        assert!(run_suite("kl-check", 1).unwrap().passed());
        assert!(run_suite("fb-check", 2).unwrap().passed());
    }
}
