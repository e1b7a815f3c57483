use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::counts::{GpVariant, ParamCounts, UncertaintyMode};
use super::orthogonal::{apply_semi_orthogonal_constraint, semi_orthogonal_residual};
use super::splice::SpliceSpec;
use crate::bayes::{
    draw_gaussian, kl_bayes_dropout, kl_gaussian, Affine, BayesDropoutConfig, DrawSite,
    GaussianVariational, GpBasisSet, LatentNoise, LatentOutputLayer, NoiseKey, NoiseStream,
    ParamBlock, Quantity, Sample, sample_weights, sample_weights_bayes_dropout,
};
use crate::error::{Error, Result};
use crate::grad::{Activation, DenseMatrix, GradTape, Var};

/// Shape and uncertainty placement of one factored layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub splice: SpliceSpec,
    pub hidden: usize,
    /// Width of the linear bottleneck; `None` gives an unfactored layer.
    pub bottleneck: Option<usize>,
    pub mode: UncertaintyMode,
    pub latent_dim: Option<usize>,
}

impl LayerSpec {
    pub fn new(offsets: &[i32], hidden: usize, bottleneck: Option<usize>) -> Result<Self> {
        Ok(Self {
            splice: SpliceSpec::new(offsets.to_vec())?,
            hidden,
            bottleneck,
            mode: UncertaintyMode::Tdnn,
            latent_dim: None,
        })
    }
}

/// Frame feature dimension, layer specs and number of output labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub input_dim: usize,
    pub labels: usize,
    pub layers: Vec<LayerSpec>,
}

impl Topology {
    /// Six factored layers with growing context, 64 hidden units and a 16-wide bottleneck.
    pub fn desk(input_dim: usize, labels: usize) -> Self {
        let offsets: [&[i32]; 6] = [&[-1, 0], &[0, 1], &[-1, 1], &[-3, 0], &[0, 3], &[-3, 3]];
        let layers = offsets
            .iter()
            .map(|o| LayerSpec::new(o, 64, Some(16)).expect("static offsets"))
            .collect();
        Self {
            input_dim,
            labels,
            layers,
        }
    }

    /// Sets `mode` on the given zero-based layers; a latent width is needed for the
    /// variational mode.
    pub fn with_mode(
        mut self,
        layers: &[usize],
        mode: UncertaintyMode,
        latent_dim: Option<usize>,
    ) -> Result<Self> {
        if mode == UncertaintyMode::Variational && latent_dim.is_none() {
            return Err(Error::MissingLatentDim);
        }
        for &l in layers {
            let n = self.layers.len();
            let spec = self
                .layers
                .get_mut(l)
                .ok_or_else(|| Error::Config(format!("layer {} out of range 1..={n}", l + 1)))?;
            spec.mode = mode;
            spec.latent_dim = if mode == UncertaintyMode::Variational {
                latent_dim
            } else {
                None
            };
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.labels < 2 || self.layers.is_empty() {
            return Err(Error::Config(
                "topology needs a feature dimension, at least two labels and one layer".into(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.hidden == 0 || l.bottleneck == Some(0) || l.latent_dim == Some(0) {
                return Err(Error::Config(format!("layer {} has a zero dimension", i + 1)));
            }
            match (l.mode, l.latent_dim) {
                (UncertaintyMode::Variational, None) => return Err(Error::MissingLatentDim),
                (UncertaintyMode::Variational, Some(_)) | (_, None) => {}
                (_, Some(_)) => {
                    return Err(Error::Config(format!(
                        "layer {} sets a latent width without the variational mode",
                        i + 1
                    )))
                }
            }
        }
        Ok(())
    }

    /// Per-frame input width of layer `l` before splicing.
    pub fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.layers[l - 1].hidden
        }
    }

    /// Input width `a` of the layer's affine block, excluding any latent columns.
    pub fn affine_input(&self, l: usize) -> usize {
        let spec = &self.layers[l];
        spec.bottleneck
            .unwrap_or(self.layer_input(l) * spec.splice.width())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("input_dim={} labels={}", self.input_dim, self.labels);
        for l in &self.layers {
            write!(
                s,
                "; splice={} hidden={} bottleneck={} mode={} latent={}",
                l.splice.to_text(),
                l.hidden,
                l.bottleneck.unwrap_or(0),
                l.mode,
                l.latent_dim.unwrap_or(0)
            )
            .expect("write to string");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("topology: {msg}"));
        let mut parts = text.split(';');
        let head = parts.next().unwrap_or_default();
        let (mut input_dim, mut labels) = (None, None);
        for kv in head.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad field `{kv}`")))?;
            let n: usize = v.parse().map_err(|_| bad(format!("bad number `{v}`")))?;
            match k {
                "input_dim" => input_dim = Some(n),
                "labels" => labels = Some(n),
                _ => return Err(bad(format!("unknown field `{k}`"))),
            }
        }
        let mut layers = Vec::new();
        for part in parts {
            let mut spec = LayerSpec {
                splice: SpliceSpec::identity(),
                hidden: 0,
                bottleneck: None,
                mode: UncertaintyMode::Tdnn,
                latent_dim: None,
            };
            for kv in part.split_whitespace() {
                let (k, v) =
                    kv.split_once('=').ok_or_else(|| bad(format!("bad field `{kv}`")))?;
                let num = || v.parse::<usize>().map_err(|_| bad(format!("bad number `{v}`")));
                match k {
                    "splice" => spec.splice = SpliceSpec::parse(v)?,
                    "hidden" => spec.hidden = num()?,
                    "bottleneck" => spec.bottleneck = Some(num()?).filter(|&n| n > 0),
                    "mode" => spec.mode = v.parse()?,
                    "latent" => spec.latent_dim = Some(num()?).filter(|&n| n > 0),
                    _ => return Err(bad(format!("unknown field `{k}`"))),
                }
            }
            layers.push(spec);
        }
        let topo = Topology {
            input_dim: input_dim.ok_or_else(|| bad("missing input_dim".into()))?,
            labels: labels.ok_or_else(|| bad("missing labels".into()))?,
            layers,
        };
        topo.validate()?;
        Ok(topo)
    }
}

/// Initialization settings for a fresh stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub seed: u64,
    /// Prior and initial posterior standard deviation of uncertain blocks.
    pub prior_sigma: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prior_sigma: 0.25,
        }
    }
}

/// One factored layer: splice, optional bottleneck `M`, affine block `A` with bias,
/// then ReLU or the activation-basis mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredLayer {
    pub spec: LayerSpec,
    pub linear: Option<DenseMatrix>,
    pub weight: ParamBlock,
    pub bias: DenseMatrix,
    pub gp: Option<GpBasisSet>,
    pub latent: Option<LatentOutputLayer>,
    pub dropout: Option<BayesDropoutConfig>,
    /// Draws nothing and evaluates every random quantity at its mean.
    pub collapsed: bool,
}

/// Shared random tensors of one layer for one forward sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerDraw {
    pub weight: Option<Sample>,
    pub lambda: Option<Sample>,
}

/// Whether a named array is optimized or describes a prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trainable,
    Prior,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn gaussian_block(mean: DenseMatrix, prior_sigma: f64) -> Result<ParamBlock> {
    let prior = DenseMatrix::zeros(mean.rows(), mean.cols());
    Ok(ParamBlock::Gaussian(GaussianVariational::new(
        mean,
        prior_sigma,
        prior,
        prior_sigma,
    )?))
}

impl FactoredLayer {
    fn init(
        spec: &LayerSpec,
        input: usize,
        rng: &mut ChaCha8Rng,
        cfg: &InitConfig,
    ) -> Result<Self> {
        let spliced = input * spec.splice.width();
        let linear = match spec.bottleneck {
            Some(k) => {
                let m = normal_matrix(rng, spliced, k, 1.0 / (spliced as f64).sqrt());
                Some(apply_semi_orthogonal_constraint(&m)?)
            }
            None => None,
        };
        let a = spec.bottleneck.unwrap_or(spliced);
        let c = spec.latent_dim.unwrap_or(0);
        let b = spec.hidden;
        let mean = normal_matrix(rng, a + c, b, (2.0 / (a + c) as f64).sqrt());
        let weight = if spec.mode.weight_uncertain() {
            gaussian_block(mean, cfg.prior_sigma)?
        } else {
            ParamBlock::Fixed(mean)
        };
        let gp = match spec.mode {
            UncertaintyMode::Gp(v) => {
                let relu = GpBasisSet::relu_selection(b);
                let lambda = if v.lambda_uncertain() {
                    ParamBlock::Gaussian(GaussianVariational::at_prior(relu, cfg.prior_sigma)?)
                } else {
                    ParamBlock::Fixed(relu)
                };
                Some(GpBasisSet::new(v, lambda)?)
            }
            _ => None,
        };
        let latent = match (spec.mode, spec.latent_dim) {
            (UncertaintyMode::Variational, Some(c)) => {
                let mu = Affine::new(
                    normal_matrix(rng, a, c, 1.0 / (a as f64).sqrt()),
                    DenseMatrix::zeros(1, c),
                )?;
                let log_sigma = Affine::new(DenseMatrix::zeros(a, c), DenseMatrix::filled(1, c, -1.0))?;
                Some(LatentOutputLayer::new(
                    mu.clone(),
                    log_sigma.clone(),
                    mu,
                    log_sigma,
                )?)
            }
            (UncertaintyMode::Variational, None) => return Err(Error::MissingLatentDim),
            _ => None,
        };
        let dropout = (spec.mode == UncertaintyMode::BayesDropout).then(BayesDropoutConfig::default);
        Ok(Self {
            spec: spec.clone(),
            linear,
            weight,
            bias: DenseMatrix::zeros(1, b),
            gp,
            latent,
            dropout,
            collapsed: false,
        })
    }

    /// Point weight used when nothing is drawn: `mu`, or `keep · mu` under the dropout
    /// mixture whose mean that is.
    pub fn mean_weight(&self) -> DenseMatrix {
        match (&self.weight, &self.dropout) {
            (ParamBlock::Gaussian(q), Some(cfg)) => q.mu.scale(cfg.keep),
            (w, _) => w.mean().clone(),
        }
    }

    /// Closed-form KL of the layer's weight and coefficient posteriors.
    pub fn parameter_kl(&self) -> f64 {
        let mut kl = 0.0;
        if let ParamBlock::Gaussian(q) = &self.weight {
            kl += match &self.dropout {
                Some(cfg) => kl_bayes_dropout(q, cfg),
                None => kl_gaussian(q),
            };
        }
        if let Some(ParamBlock::Gaussian(q)) = self.gp.as_ref().map(|g| &g.lambda) {
            kl += kl_gaussian(q);
        }
        kl
    }

    /// Free-parameter counts of the affine block, coefficients and latent networks.
    pub fn table_counts(&self) -> ParamCounts {
        ParamCounts {
            lambda: self.gp.as_ref().map_or(0, |g| g.lambda.free_params()),
            w: self.weight.free_params(),
            z: self.latent.as_ref().map_or(0, |l| l.weight_params()),
        }
    }

    /// Table counts plus the bottleneck matrix, for the factored view.
    pub fn factored_counts(&self) -> usize {
        self.table_counts().total() + self.linear.as_ref().map_or(0, |m| m.len())
    }

    pub fn is_stochastic(&self) -> bool {
        !self.collapsed
            && (self.weight.is_gaussian()
                || self.latent.is_some()
                || self.gp.as_ref().is_some_and(|g| g.lambda.is_gaussian()))
    }

    /// Records the layer on `tape` and returns its output and, for latent layers, the
    /// summed latent KL.
    fn record(
        &self,
        tape: &mut GradTape,
        x: Var,
        prefix: &str,
        index: usize,
        draw: Option<&LayerDraw>,
        latent_noise: LatentNoise<'_>,
    ) -> Result<(Var, Option<Var>)> {
        let mut h = tape.splice(x, &self.spec.splice)?;
        if let Some(m) = &self.linear {
            let mv = tape.param(format!("{prefix}.linear"), m.clone());
            h = tape.matmul(h, mv)?;
        }
        let mut latent_kl = None;
        if let Some(latent) = &self.latent {
            let source = if self.collapsed {
                LatentNoise::Mean
            } else {
                latent_noise
            };
            let (out, kl) = latent.record(tape, h, &format!("{prefix}.latent"), index, source)?;
            h = out;
            latent_kl = Some(kl);
        }
        let sampled = draw.filter(|_| !self.collapsed);
        let w = match (&self.weight, sampled.and_then(|d| d.weight.as_ref())) {
            (ParamBlock::Fixed(w), _) => tape.param(format!("{prefix}.w"), w.clone()),
            (ParamBlock::Gaussian(_), Some(s)) => {
                tape.param(format!("{prefix}.w#sample"), s.value.clone())
            }
            (ParamBlock::Gaussian(_), None) => tape.constant(self.mean_weight()),
        };
        let b = tape.param(format!("{prefix}.b"), self.bias.clone());
        let pre = tape.affine(h, w, b)?;
        let out = match &self.gp {
            None => tape.activation(pre, Activation::Relu),
            Some(gp) => {
                let lambda = match (&gp.lambda, sampled.and_then(|d| d.lambda.as_ref())) {
                    (ParamBlock::Fixed(l), _) => tape.param(format!("{prefix}.lambda"), l.clone()),
                    (ParamBlock::Gaussian(_), Some(s)) => {
                        tape.param(format!("{prefix}.lambda#sample"), s.value.clone())
                    }
                    (ParamBlock::Gaussian(q), None) => tape.constant(q.mu.clone()),
                };
                tape.gp_mix(pre, lambda)?
            }
        };
        Ok((out, latent_kl))
    }
}

/// Variables produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `T × labels` raw log-scores.
    pub scores: Var,
    /// Summed latent KL of each latent layer, with the layer index.
    pub latent_kl: Vec<(usize, Var)>,
}

/// Ordered factored layers followed by an affine output head without softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct TdnnStack {
    pub topology: Topology,
    pub layers: Vec<FactoredLayer>,
    pub output_w: DenseMatrix,
    pub output_b: DenseMatrix,
}

/// Canonical name prefix of zero-based layer `l`.
pub fn layer_prefix(l: usize) -> String {
    format!("layer{}", l + 1)
}

impl TdnnStack {
    pub fn new(topology: Topology, cfg: &InitConfig) -> Result<Self> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(topology.layers.len());
        for (l, spec) in topology.layers.iter().enumerate() {
            layers.push(FactoredLayer::init(spec, topology.layer_input(l), &mut rng, cfg)?);
        }
        let last = topology.layers.last().expect("validated").hidden;
        let output_w = normal_matrix(&mut rng, last, topology.labels, 1.0 / (last as f64).sqrt());
        let output_b = DenseMatrix::zeros(1, topology.labels);
        Ok(Self {
            topology,
            layers,
            output_w,
            output_b,
        })
    }

    /// Fresh output head drawn from `seed`.
    pub fn reinit_output(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_7470_7574);
        let (rows, cols) = self.output_w.shape();
        self.output_w = normal_matrix(&mut rng, rows, cols, 1.0 / (rows as f64).sqrt());
        self.output_b = DenseMatrix::zeros(1, cols);
    }

    /// Replaces layer `l` by a freshly initialized deterministic layer of the same shape.
    pub fn reinit_layer(&mut self, l: usize, seed: u64) -> Result<()> {
        let mut spec = self.topology.layers[l].clone();
        spec.mode = UncertaintyMode::Tdnn;
        spec.latent_dim = None;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x6c61_7965_72 + l as u64));
        let input = self.topology.layer_input(l);
        self.layers[l] = FactoredLayer::init(&spec, input, &mut rng, &InitConfig::default())?;
        self.topology.layers[l] = spec;
        Ok(())
    }

    pub fn labels(&self) -> usize {
        self.topology.labels
    }

    pub fn is_stochastic(&self) -> bool {
        self.layers.iter().any(FactoredLayer::is_stochastic)
    }

    /// Draws the shared weight and coefficient noise for sample `draw` of `step`.
    ///
    /// Each uncertain quantity consumes exactly one ε tensor; collapsed layers draw nothing.
    pub fn draw(&self, noise: &NoiseStream, step: u64, draw: u32) -> Vec<LayerDraw> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                if layer.collapsed {
                    return LayerDraw::default();
                }
                let weight = layer.weight.gaussian().map(|q| {
                    let key = NoiseKey::shared(step, DrawSite::new(l, Quantity::Weight), draw);
                    draw_gaussian(q, layer.dropout.as_ref(), noise, key)
                });
                let lambda = layer.gp.as_ref().and_then(|g| g.lambda.gaussian()).map(|q| {
                    let key = NoiseKey::shared(step, DrawSite::new(l, Quantity::Lambda), draw);
                    draw_gaussian(q, None, noise, key)
                });
                LayerDraw { weight, lambda }
            })
            .collect()
    }

    /// Recomputes the sampled values of `draws` from their stored noise under the
    /// current parameters.
    pub fn redraw(&self, draws: &[LayerDraw]) -> Result<Vec<LayerDraw>> {
        let mut out = Vec::with_capacity(draws.len());
        for (layer, d) in self.layers.iter().zip(draws) {
            let weight = match (&d.weight, layer.weight.gaussian()) {
                (Some(s), Some(q)) => Some(Sample {
                    value: match &layer.dropout {
                        Some(cfg) => sample_weights_bayes_dropout(q, cfg, &s.eps)?,
                        None => sample_weights(q, &s.eps)?,
                    },
                    eps: s.eps.clone(),
                }),
                _ => None,
            };
            let lambda = match (&d.lambda, layer.gp.as_ref().and_then(|g| g.lambda.gaussian())) {
                (Some(s), Some(q)) => Some(Sample {
                    value: sample_weights(q, &s.eps)?,
                    eps: s.eps.clone(),
                }),
                _ => None,
            };
            out.push(LayerDraw { weight, lambda });
        }
        Ok(out)
    }

    /// Records a full forward pass of one sequence.
    ///
    /// `draws = None` evaluates every uncertain block at its mean.
    pub fn forward_tape(
        &self,
        tape: &mut GradTape,
        x: &DenseMatrix,
        draws: Option<&[LayerDraw]>,
        latent_noise: LatentNoise<'_>,
    ) -> Result<ForwardVars> {
        if x.cols() != self.topology.input_dim {
            return Err(Error::shape(
                "stack input",
                (x.rows(), self.topology.input_dim),
                x.shape(),
            ));
        }
        let mut h = tape.constant(x.clone());
        let mut latent_kl = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let draw = draws.and_then(|d| d.get(l));
            let (out, kl) = layer.record(tape, h, &layer_prefix(l), l, draw, latent_noise)?;
            h = out;
            latent_kl.extend(kl.map(|v| (l, v)));
        }
        let w = tape.param("output.w", self.output_w.clone());
        let b = tape.param("output.b", self.output_b.clone());
        let scores = tape.affine(h, w, b)?;
        Ok(ForwardVars { scores, latent_kl })
    }

    /// Log-scores at the posterior mean; draws no random numbers.
    pub fn forward_eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut tape = GradTape::new();
        let vars = self.forward_tape(&mut tape, x, None, LatentNoise::Mean)?;
        Ok(tape.value(vars.scores).clone())
    }

    /// Log-scores under the given draws and latent noise.
    pub fn forward_sampled(
        &self,
        x: &DenseMatrix,
        draws: &[LayerDraw],
        latent_noise: LatentNoise<'_>,
    ) -> Result<DenseMatrix> {
        let mut tape = GradTape::new();
        let vars = self.forward_tape(&mut tape, x, Some(draws), latent_noise)?;
        Ok(tape.value(vars.scores).clone())
    }

    /// Per-layer closed-form KL of weight and coefficient posteriors.
    pub fn parameter_kl(&self) -> Vec<f64> {
        self.layers.iter().map(FactoredLayer::parameter_kl).collect()
    }

    pub fn table_counts(&self) -> Vec<ParamCounts> {
        self.layers.iter().map(FactoredLayer::table_counts).collect()
    }

    /// Enforces semi-orthogonality on every bottleneck.
    pub fn apply_constraints(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Some(m) = &layer.linear {
                layer.linear = Some(apply_semi_orthogonal_constraint(m)?);
            }
        }
        Ok(())
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.linear.as_ref())
            .map(semi_orthogonal_residual)
            .fold(0.0, f64::max)
    }

    /// Every stored array by canonical name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, ParamRole, &DenseMatrix)> {
        use ParamRole::{Prior, Trainable};
        let mut out = Vec::new();
        fn block<'a>(out: &mut Vec<(String, ParamRole, &'a DenseMatrix)>, name: String, b: &'a ParamBlock) {
            match b {
                ParamBlock::Fixed(m) => out.push((name, Trainable, m)),
                ParamBlock::Gaussian(q) => {
                    out.push((format!("{name}.mu"), Trainable, &q.mu));
                    out.push((format!("{name}.rho"), Trainable, &q.rho));
                    out.push((format!("{name}.prior_mu"), Prior, &q.prior_mu));
                    out.push((format!("{name}.prior_sigma"), Prior, &q.prior_sigma));
                }
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let p = layer_prefix(l);
            if let Some(m) = &layer.linear {
                out.push((format!("{p}.linear"), Trainable, m));
            }
            block(&mut out, format!("{p}.w"), &layer.weight);
            out.push((format!("{p}.b"), Trainable, &layer.bias));
            if let Some(gp) = &layer.gp {
                block(&mut out, format!("{p}.lambda"), &gp.lambda);
            }
            if let Some(lat) = &layer.latent {
                for (name, a) in latent_parts(lat) {
                    out.push((format!("{p}.latent.{name}.w"), Trainable, &a.w));
                    out.push((format!("{p}.latent.{name}.b"), Trainable, &a.b));
                }
            }
        }
        out.push(("output.w".into(), Trainable, &self.output_w));
        out.push(("output.b".into(), Trainable, &self.output_b));
        out
    }

    /// Mutable view of every trainable array by canonical name.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut DenseMatrix)> {
        let mut out = Vec::new();
        fn block<'a>(out: &mut Vec<(String, &'a mut DenseMatrix)>, name: String, b: &'a mut ParamBlock) {
            match b {
                ParamBlock::Fixed(m) => out.push((name, m)),
                ParamBlock::Gaussian(q) => {
                    out.push((format!("{name}.mu"), &mut q.mu));
                    out.push((format!("{name}.rho"), &mut q.rho));
                }
            }
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = layer_prefix(l);
            if let Some(m) = &mut layer.linear {
                out.push((format!("{p}.linear"), m));
            }
            block(&mut out, format!("{p}.w"), &mut layer.weight);
            out.push((format!("{p}.b"), &mut layer.bias));
            if let Some(gp) = &mut layer.gp {
                block(&mut out, format!("{p}.lambda"), &mut gp.lambda);
            }
            if let Some(lat) = &mut layer.latent {
                let LatentOutputLayer {
                    infer_mu,
                    infer_log_sigma,
                    prior_mu,
                    prior_log_sigma,
                } = lat;
                for (name, a) in [
                    ("infer.mu", infer_mu),
                    ("infer.log_sigma", infer_log_sigma),
                    ("prior_net.mu", prior_mu),
                    ("prior_net.log_sigma", prior_log_sigma),
                ] {
                    out.push((format!("{p}.latent.{name}.w"), &mut a.w));
                    out.push((format!("{p}.latent.{name}.b"), &mut a.b));
                }
            }
        }
        out.push(("output.w".into(), &mut self.output_w));
        out.push(("output.b".into(), &mut self.output_b));
        out
    }

    /// Stack with every layer replaced by its posterior-mean collapse.
    pub fn collapse(&self) -> TdnnStack {
        TdnnStack {
            topology: self.topology.clone(),
            layers: self.layers.iter().map(posterior_mean_collapse).collect(),
            output_w: self.output_w.clone(),
            output_b: self.output_b.clone(),
        }
    }
}

fn latent_parts(l: &LatentOutputLayer) -> [(&'static str, &Affine); 4] {
    [
        ("infer.mu", &l.infer_mu),
        ("infer.log_sigma", &l.infer_log_sigma),
        ("prior_net.mu", &l.prior_mu),
        ("prior_net.log_sigma", &l.prior_log_sigma),
    ]
}

/// Names of trainable arrays that count as weight matrices for the L2 penalty.
pub fn is_weight_matrix(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".w.mu")
}

/// Deterministic copy of `layer`: weights and coefficients at their posterior means,
/// latent outputs at the inference mean.
pub fn posterior_mean_collapse(layer: &FactoredLayer) -> FactoredLayer {
    FactoredLayer {
        spec: layer.spec.clone(),
        linear: layer.linear.clone(),
        weight: ParamBlock::Fixed(layer.mean_weight()),
        bias: layer.bias.clone(),
        gp: layer.gp.as_ref().map(GpBasisSet::collapse),
        latent: layer.latent.clone(),
        dropout: None,
        collapsed: true,
    }
}

/// GP variant of a mode, if any.
pub fn gp_variant(mode: UncertaintyMode) -> Option<GpVariant> {
    match mode {
        UncertaintyMode::Gp(v) => Some(v),
        _ => None,
    }
}
