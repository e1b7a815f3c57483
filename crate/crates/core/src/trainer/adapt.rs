use super::{Checkpoint, MetricsRow, TrainConfig, Trainer};
use crate::bayes::{GaussianVariational, GpBasisSet, ParamBlock};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::grad::DenseMatrix;
use crate::tdnn::{layer_prefix, InitConfig, TdnnStack, Topology, UncertaintyMode};

/// Layer names where two topologies differ, ignoring uncertainty placement.
fn divergent_layers(a: &Topology, b: &Topology) -> Vec<String> {
    let mut out = Vec::new();
    if a.input_dim != b.input_dim {
        out.push("input".to_string());
    }
    for l in 0..a.layers.len().max(b.layers.len()) {
        let same = match (a.layers.get(l), b.layers.get(l)) {
            (Some(x), Some(y)) => x.splice == y.splice && x.hidden == y.hidden && x.bottleneck == y.bottleneck,
            _ => false,
        };
        if !same {
            out.push(layer_prefix(l));
        }
    }
    if a.labels != b.labels {
        out.push("output".to_string());
    }
    out
}

fn plain(t: &Topology) -> Topology {
    let mut t = t.clone();
    for l in &mut t.layers {
        l.mode = UncertaintyMode::Tdnn;
        l.latent_dim = None;
    }
    t
}

fn gaussian(mu: DenseMatrix, prior_mu: DenseMatrix, sigma: f64) -> Result<ParamBlock> {
    Ok(ParamBlock::Gaussian(GaussianVariational::new(mu, sigma, prior_mu, sigma)?))
}

/// Initial model for uncertainty training: every layer in `cfg.bayes_layers` gets
/// posterior means from `half_trained` and priors centred on `converged`, with prior
/// and posterior sigma both `cfg.prior_sigma`. All other arrays come from
/// `half_trained`. With `mode = tdnn` this is a plain copy of `half_trained`.
pub fn bootstrap_prior(converged: &TdnnStack, half_trained: &TdnnStack, cfg: &TrainConfig) -> Result<TdnnStack> {
    let diverged = divergent_layers(&converged.topology, &half_trained.topology);
    if !diverged.is_empty() {
        return Err(Error::TopologyMismatch { layers: diverged });
    }
    if cfg.mode == UncertaintyMode::Tdnn {
        return Ok(half_trained.clone());
    }
    let topology = cfg.training_topology(plain(&half_trained.topology))?;
    let init = InitConfig {
        seed: cfg.seed,
        prior_sigma: cfg.prior_sigma,
    };
    let mut stack = TdnnStack::new(topology, &init)?;
    let sigma = cfg.prior_sigma;
    for (l, layer) in stack.layers.iter_mut().enumerate() {
        let half = &half_trained.layers[l];
        let conv = &converged.layers[l];
        layer.linear = half.linear.clone();
        layer.bias = half.bias.clone();
        let (w_half, w_conv) = (half.mean_weight(), conv.mean_weight());
        let rows = layer.weight.shape().0;
        // latent inputs come first and start disconnected
        let pad = |w: &DenseMatrix| {
            let c = rows - w.rows();
            DenseMatrix::from_fn(rows, w.cols(), |r, k| if r < c { 0.0 } else { w.get(r - c, k) })
        };
        layer.weight = match (&layer.weight, layer.dropout) {
            (ParamBlock::Fixed(_), _) => ParamBlock::Fixed(pad(&w_half)),
            // the collapsed mean of the mixture is keep · mu
            (ParamBlock::Gaussian(_), Some(d)) => {
                gaussian(w_half.scale(1.0 / d.keep), w_conv.scale(1.0 / d.keep), sigma)?
            }
            (ParamBlock::Gaussian(_), None) => gaussian(w_half, w_conv, sigma)?,
        };
        if let Some(gp) = &layer.gp {
            let relu = GpBasisSet::relu_selection(gp.nodes());
            let prior = conv.gp.as_ref().map_or_else(|| relu.clone(), |g| g.lambda.mean().clone());
            let lambda = if gp.lambda.is_gaussian() {
                gaussian(relu, prior, sigma)?
            } else {
                ParamBlock::Fixed(relu)
            };
            layer.gp = Some(GpBasisSet::new(gp.variant(), lambda)?);
        }
    }
    stack.output_w = half_trained.output_w.clone();
    stack.output_b = half_trained.output_b.clone();
    Ok(stack)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptStrategy {
    FineTune,
    BayesAdapt,
}

impl AdaptStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fine_tune" => Ok(Self::FineTune),
            "bayes_adapt" => Ok(Self::BayesAdapt),
            other => Err(Error::Config(format!("unknown adaptation strategy `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FineTune => "fine_tune",
            Self::BayesAdapt => "bayes_adapt",
        }
    }
}

/// A part of the source model to reinitialize before adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinitTarget {
    /// One-based layer index.
    Layer(usize),
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub strategy: AdaptStrategy,
    /// Reinitialized before fine-tuning.
    pub layers_reinit: Vec<ReinitTarget>,
    /// Initial posterior sigma of the adapted layer, capped at the prior sigma.
    /// `None` starts the posterior at the prior sigma, so the initial KL is zero.
    pub init_sigma: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            strategy: AdaptStrategy::FineTune,
            layers_reinit: vec![ReinitTarget::Output],
            init_sigma: None,
        }
    }
}

/// Starting point of the Bayesian stage: `fine_tuned` with layer 1 turned into a
/// Gaussian layer centred on its own weights (prior sigma `cfg.prior_sigma`) and
/// the output layer reinitialized.
pub fn bayes_adapt_init(fine_tuned: &TdnnStack, acfg: &AdaptConfig, cfg: &TrainConfig) -> Result<TdnnStack> {
    let first = fine_tuned
        .layers
        .first()
        .ok_or_else(|| Error::Config("model has no hidden layers".into()))?;
    if first.spec.mode != UncertaintyMode::Tdnn {
        return Err(Error::Config(format!(
            "bayes_adapt needs a deterministic first layer, source has {}",
            first.spec.mode
        )));
    }
    let sigma = acfg.init_sigma.map_or(cfg.prior_sigma, |s| s.min(cfg.prior_sigma));
    let mut stack = fine_tuned.clone();
    let w = first.mean_weight();
    let layer = &mut stack.layers[0];
    layer.weight = ParamBlock::Gaussian(GaussianVariational::new(w.clone(), sigma, w, cfg.prior_sigma)?);
    layer.spec.mode = UncertaintyMode::Bayes;
    stack.topology.layers[0].mode = UncertaintyMode::Bayes;
    stack.reinit_output(cfg.seed.wrapping_add(1));
    Ok(stack)
}

fn fine_tune(stack: TdnnStack, target: &Corpus, reinit: &[ReinitTarget], cfg: &TrainConfig, step: u64) -> Result<(Trainer, Vec<MetricsRow>)> {
    let mut stack = stack;
    for r in reinit {
        match *r {
            ReinitTarget::Output => stack.reinit_output(cfg.seed),
            ReinitTarget::Layer(l) => stack.reinit_layer(l - 1, cfg.seed)?,
        }
    }
    let mut t = Trainer::new(stack, cfg.clone(), target.bigram.clone(), target.train_frames(), step)?;
    let metrics = t.run_epochs(target, 0, cfg.epochs)?;
    Ok((t, metrics))
}

/// Adapts `source` to `target`.
///
/// `fine_tune` reinitializes `layers_reinit` and continues training every array.
/// `bayes_adapt` fine-tunes first, then continues from [`bayes_adapt_init`] of the
/// fine-tuned model and maximizes the ELBO. `cfg.mode` and `cfg.bayes_layers` are
/// ignored. Both stages run `cfg.epochs` epochs.
pub fn adapt(source: &Checkpoint, target: &Corpus, acfg: &AdaptConfig, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    cfg.validate()?;
    if let Some(s) = acfg.init_sigma {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("init_sigma must be positive, got {s}")));
        }
    }
    let topo = &source.stack.topology;
    let mut diverged = Vec::new();
    if topo.input_dim != target.feature_dim {
        diverged.push("input".to_string());
    }
    if topo.labels != target.labels {
        diverged.push("output".to_string());
    }
    for r in &acfg.layers_reinit {
        if let ReinitTarget::Layer(l) = *r {
            if l == 0 || l > topo.layers.len() {
                diverged.push(format!("layer{l}"));
            }
        }
    }
    if !diverged.is_empty() {
        return Err(Error::TopologyMismatch { layers: diverged });
    }
    if target.train.is_empty() {
        return Err(Error::Config("target corpus has no training utterances".into()));
    }
    let provenance = Some(source.content_hash());
    let (mut t, mut metrics) = fine_tune(source.stack.clone(), target, &acfg.layers_reinit, cfg, source.step)?;
    if acfg.strategy == AdaptStrategy::BayesAdapt {
        let stack = bayes_adapt_init(&t.stack, acfg, cfg)?;
        let mut b = Trainer::new(stack, cfg.clone(), target.bigram.clone(), target.train_frames(), t.step)?;
        metrics.extend(b.run_epochs(target, 0, cfg.epochs)?);
        t = b;
    }
    let mut ck = t.checkpoint();
    ck.provenance = provenance;
    Ok((ck, metrics))
}
