use super::gaussian::{
    sample_weights, sample_weights_bayes_dropout, BayesDropoutConfig, GaussianVariational,
};
use super::noise::{NoiseKey, NoiseStream};
use crate::grad::DenseMatrix;

/// A parameter array that is either a point estimate or a Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamBlock {
    Fixed(DenseMatrix),
    Gaussian(GaussianVariational),
}

impl ParamBlock {
    /// Point value used at evaluation time: the value itself or the posterior mean.
    pub fn mean(&self) -> &DenseMatrix {
        match self {
            ParamBlock::Fixed(m) => m,
            ParamBlock::Gaussian(q) => &q.mu,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean().shape()
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, ParamBlock::Gaussian(_))
    }

    pub fn gaussian(&self) -> Option<&GaussianVariational> {
        match self {
            ParamBlock::Gaussian(q) => Some(q),
            ParamBlock::Fixed(_) => None,
        }
    }

    pub fn gaussian_mut(&mut self) -> Option<&mut GaussianVariational> {
        match self {
            ParamBlock::Gaussian(q) => Some(q),
            ParamBlock::Fixed(_) => None,
        }
    }

    /// Free parameters: the array itself, plus one tied sigma per row when Gaussian.
    pub fn free_params(&self) -> usize {
        match self {
            ParamBlock::Fixed(m) => m.len(),
            ParamBlock::Gaussian(q) => q.free_params(),
        }
    }

    /// Replaces a posterior by its mean.
    pub fn collapse(&self) -> ParamBlock {
        ParamBlock::Fixed(self.mean().clone())
    }
}

/// One reparameterized draw of a Gaussian block together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub value: DenseMatrix,
    pub eps: DenseMatrix,
}

/// Draws one ε tensor for `q` under `key` and maps it through the posterior.
///
/// With a dropout configuration the mixture sample is produced from the same ε.
pub fn draw_gaussian(
    q: &GaussianVariational,
    dropout: Option<&BayesDropoutConfig>,
    noise: &NoiseStream,
    key: NoiseKey,
) -> Sample {
    let (rows, cols) = q.shape();
    let eps = noise.standard_normal(key, rows, cols);
    let value = match dropout {
        Some(cfg) => sample_weights_bayes_dropout(q, cfg, &eps),
        None => sample_weights(q, &eps),
    }
    .expect("eps drawn with the posterior's shape");
    Sample { value, eps }
}
