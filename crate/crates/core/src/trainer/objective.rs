use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bayes::{
    elbo_hyperparam_grads, reparam_mc_grads, bayes_dropout_hyperparam_grads, GaussianVariational,
    LatentNoise, NoiseStream, ParamBlock,
};
use crate::criterion::{
    build_weighted_numerator_graph, ce_loss_and_grad, combine, mmi_loss_and_grad, Bigram,
    CriterionConfig, ElboBreakdown, SequenceGraph,
};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::grad::{DenseMatrix, GradTape, Gradients};
use crate::tdnn::{is_weight_matrix, layer_prefix, LayerDraw, ParamRole, TdnnStack};

/// Whether the analytic KL gradient is folded into the returned gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlGradient {
    /// Full objective gradient.
    Included,
    /// Data term only; the KL part is applied separately.
    Omitted,
}

/// Objective value and gradients of one minibatch keyed by trainable parameter name.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: ElboBreakdown,
    pub grads: Gradients,
    pub frames: usize,
}

/// Stable per-utterance key for latent noise.
pub fn sequence_key(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

struct SequenceResult {
    mmi: f64,
    ce: f64,
    latent: Vec<(usize, f64)>,
    grads: Gradients,
}

fn sequence_pass(
    stack: &TdnnStack,
    utt: &Utterance,
    bigram: &Bigram,
    den: &SequenceGraph,
    draws: &[LayerDraw],
    latent_noise: LatentNoise<'_>,
    crit: &CriterionConfig,
) -> Result<SequenceResult> {
    let mut tape = GradTape::new();
    let vars = stack.forward_tape(&mut tape, &utt.features, Some(draws), latent_noise)?;
    let scores = tape.value(vars.scores);
    let num = build_weighted_numerator_graph(&utt.alignment, bigram)?;
    let (mmi, g_mmi) = mmi_loss_and_grad(&num, den, scores, crit)?;
    let (ce, g_ce) = ce_loss_and_grad(scores, &utt.alignment)?;
    // d(mmi − λ·ce)/d scores
    let seed = g_mmi.zip_with(&g_ce, "objective seed", |m, c| m - crit.f_smooth_lambda * c)?;
    let mut seeds = vec![(vars.scores, seed)];
    let mut latent = Vec::with_capacity(vars.latent_kl.len());
    for &(l, v) in &vars.latent_kl {
        latent.push((l, tape.value(v).get(0, 0)));
        seeds.push((v, DenseMatrix::filled(1, 1, -1.0)));
    }
    let grads = tape.backward_multi(seeds)?;
    Ok(SequenceResult {
        mmi,
        ce,
        latent,
        grads,
    })
}

/// Replaces the gradient of a sampled block by its `(mu, rho)` chain.
fn chain_sample(
    grads: &mut Gradients,
    name: &str,
    q: &GaussianVariational,
    eps: &DenseMatrix,
    keep: f64,
) -> Result<()> {
    let g = grads
        .remove(&format!("{name}#sample"))
        .unwrap_or_else(|| DenseMatrix::zeros(q.mu.rows(), q.mu.cols()));
    let (mc_mu, mc_sigma) = reparam_mc_grads(&g, eps, keep)?;
    let h = elbo_hyperparam_grads(&mc_mu, &mc_sigma, q, 0.0)?;
    grads.accumulate(&format!("{name}.mu"), &h.mu)?;
    grads.accumulate(&format!("{name}.rho"), &h.rho)?;
    Ok(())
}

fn add_kl_grads(grads: &mut Gradients, stack: &TdnnStack, kl_scale: f64) -> Result<()> {
    for (l, layer) in stack.layers.iter().enumerate() {
        let p = layer_prefix(l);
        if let ParamBlock::Gaussian(q) = &layer.weight {
            let zero = DenseMatrix::zeros(q.mu.rows(), q.mu.cols());
            let sig = vec![0.0; q.mu.rows()];
            let h = match &layer.dropout {
                Some(cfg) => bayes_dropout_hyperparam_grads(&zero, &sig, q, cfg, kl_scale)?,
                None => elbo_hyperparam_grads(&zero, &sig, q, kl_scale)?,
            };
            grads.accumulate(&format!("{p}.w.mu"), &h.mu)?;
            grads.accumulate(&format!("{p}.w.rho"), &h.rho)?;
        }
        if let Some(ParamBlock::Gaussian(q)) = layer.gp.as_ref().map(|g| &g.lambda) {
            let zero = DenseMatrix::zeros(q.mu.rows(), q.mu.cols());
            let h = elbo_hyperparam_grads(&zero, &vec![0.0; q.mu.rows()], q, kl_scale)?;
            grads.accumulate(&format!("{p}.lambda.mu"), &h.mu)?;
            grads.accumulate(&format!("{p}.lambda.rho"), &h.rho)?;
        }
    }
    Ok(())
}

/// Sum of squared weight-matrix entries and its contribution `−2·l2_weight·θ`.
fn l2_penalty(stack: &TdnnStack, l2_weight: f64, grads: &mut Gradients) -> Result<f64> {
    let mut term = 0.0;
    for (name, role, m) in stack.named_params() {
        if role != ParamRole::Trainable || !is_weight_matrix(&name) {
            continue;
        }
        term += m.sum_squares();
        if l2_weight != 0.0 {
            grads.accumulate(&name, &m.scale(-2.0 * l2_weight))?;
        }
    }
    Ok(term)
}

/// The minibatch objective
/// `Σ_u [mmi_u − λ·ce_u − latent_kl_u] − kl_scale·Σ_l KL_l − l2_weight·‖W‖²`,
/// averaged over the `draws.len()` Monte Carlo samples, and its gradient.
///
/// Utterances are evaluated in parallel and reduced in batch order, so the result
/// does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    stack: &TdnnStack,
    batch: &[&Utterance],
    bigram: &Bigram,
    den: &SequenceGraph,
    draws: &[Vec<LayerDraw>],
    noise: &NoiseStream,
    step: u64,
    crit: &CriterionConfig,
    kl_scale: f64,
    kl_grad: KlGradient,
) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::Config("minibatch is empty".into()));
    }
    if draws.is_empty() {
        return Err(Error::Config("at least one Monte Carlo sample is required".into()));
    }
    let layers = stack.layers.len();
    let n = draws.len() as f64;
    let (mut mmi, mut ce) = (0.0, 0.0);
    let mut latent = vec![0.0; layers];
    let mut grads = Gradients::new();
    for (d, draw) in draws.iter().enumerate() {
        let results: Vec<Result<SequenceResult>> = batch
            .par_iter()
            .map(|u| {
                let latent_noise = LatentNoise::Sample {
                    noise,
                    step,
                    sequence: sequence_key(&u.id),
                    draw: d as u32,
                };
                sequence_pass(stack, u, bigram, den, draw, latent_noise, crit)
            })
            .collect();
        let mut sample = Gradients::new();
        for r in results {
            let r = r?;
            mmi += r.mmi;
            ce += r.ce;
            for (l, v) in r.latent {
                latent[l] += v;
            }
            sample.merge(&r.grads)?;
        }
        for (l, (layer, ld)) in stack.layers.iter().zip(draw).enumerate() {
            let p = layer_prefix(l);
            if let (Some(q), Some(s)) = (layer.weight.gaussian(), &ld.weight) {
                let keep = layer.dropout.map_or(1.0, |c| c.keep);
                chain_sample(&mut sample, &format!("{p}.w"), q, &s.eps, keep)?;
            }
            let lambda = layer.gp.as_ref().and_then(|g| g.lambda.gaussian());
            if let (Some(q), Some(s)) = (lambda, &ld.lambda) {
                chain_sample(&mut sample, &format!("{p}.lambda"), q, &s.eps, 1.0)?;
            }
        }
        grads.merge(&sample)?;
    }
    if draws.len() > 1 {
        grads.scale(1.0 / n);
    }
    if kl_grad == KlGradient::Included {
        add_kl_grads(&mut grads, stack, kl_scale)?;
    }
    let l2 = l2_penalty(stack, crit.l2_weight, &mut grads)?;
    let kl_terms = stack
        .parameter_kl()
        .into_iter()
        .zip(&latent)
        .map(|(p, z)| kl_scale * p + z / n)
        .collect();
    let breakdown = combine(mmi / n, kl_terms, -ce / n, l2, crit)?;
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite { term: "gradient" });
    }
    Ok(Evaluation {
        breakdown,
        grads,
        frames: batch.iter().map(|u| u.frames()).sum(),
    })
}
