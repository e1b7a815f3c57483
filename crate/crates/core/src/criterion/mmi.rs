use super::forward_backward::forward_backward;
use super::graph::SequenceGraph;
use crate::error::{Error, Result};
use crate::grad::{logsumexp, DenseMatrix};

/// Acoustic scale and the weights of the interpolated regularizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionConfig {
    pub acoustic_scale: f64,
    /// Weight of the negated cross entropy added to the objective.
    pub f_smooth_lambda: f64,
    pub l2_weight: f64,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        Self {
            acoustic_scale: 1.0,
            f_smooth_lambda: 0.1,
            l2_weight: 0.0,
        }
    }
}

impl CriterionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.acoustic_scale > 0.0) || !self.acoustic_scale.is_finite() {
            return Err(Error::Config(format!(
                "acoustic scale must be positive, got {}",
                self.acoustic_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.f_smooth_lambda) {
            return Err(Error::Config(format!(
                "f_smooth_lambda must lie in [0,1], got {}",
                self.f_smooth_lambda
            )));
        }
        if !(self.l2_weight >= 0.0) || !self.l2_weight.is_finite() {
            return Err(Error::Config(format!(
                "l2_weight must be non-negative, got {}",
                self.l2_weight
            )));
        }
        Ok(())
    }
}

/// `F = log Z_num − log Z_den` and its gradient `k · (occ_num − occ_den)`.
pub fn mmi_loss_and_grad(
    num: &SequenceGraph,
    den: &SequenceGraph,
    log_scores: &DenseMatrix,
    cfg: &CriterionConfig,
) -> Result<(f64, DenseMatrix)> {
    let k = cfg.acoustic_scale;
    let n = forward_backward(num, log_scores, k)?;
    let d = forward_backward(den, log_scores, k)?;
    let grad = n.occupancy.zip_with(&d.occupancy, "mmi occupancy", |a, b| k * (a - b))?;
    Ok((n.log_total - d.log_total, grad))
}

/// Summed frame cross entropy of `alignment` under a log-softmax of the scores, and its
/// gradient with respect to the scores.
pub fn ce_loss_and_grad(log_scores: &DenseMatrix, alignment: &[usize]) -> Result<(f64, DenseMatrix)> {
    if alignment.len() != log_scores.rows() {
        return Err(Error::shape(
            "cross entropy alignment",
            log_scores.shape(),
            (alignment.len(), log_scores.cols()),
        ));
    }
    let labels = log_scores.cols();
    let mut grad = DenseMatrix::zeros(log_scores.rows(), labels);
    let mut value = 0.0;
    for (t, &a) in alignment.iter().enumerate() {
        if a >= labels {
            return Err(Error::LabelOutOfRange { label: a, labels });
        }
        let row = log_scores.row(t);
        let lse = logsumexp(row);
        value += lse - row[a];
        let g = grad.row_mut(t);
        for (j, (gj, &s)) in g.iter_mut().zip(row).enumerate() {
            *gj = (s - lse).exp() - if j == a { 1.0 } else { 0.0 };
        }
    }
    Ok((value, grad))
}

/// Loss decomposition of one objective evaluation. The objective is maximized:
/// `total = mmi − Σ kl + f_smooth_lambda · ce_term − l2_weight · l2_term`, where
/// `ce_term` is the negated cross entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub mmi_term: f64,
    pub kl_terms: Vec<f64>,
    pub ce_term: f64,
    pub l2_term: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn kl_total(&self) -> f64 {
        self.kl_terms.iter().sum()
    }
}

pub fn combine(
    mmi_term: f64,
    kl_terms: Vec<f64>,
    ce_term: f64,
    l2_term: f64,
    cfg: &CriterionConfig,
) -> Result<ElboBreakdown> {
    for (term, v) in [("mmi", mmi_term), ("ce", ce_term), ("l2", l2_term)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term });
        }
    }
    if kl_terms.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "kl" });
    }
    let kl: f64 = kl_terms.iter().sum();
    let total = mmi_term - kl + cfg.f_smooth_lambda * ce_term - cfg.l2_weight * l2_term;
    Ok(ElboBreakdown {
        mmi_term,
        kl_terms,
        ce_term,
        l2_term,
        total,
    })
}
