use super::block::{draw_gaussian, ParamBlock};
use super::noise::{DrawSite, NoiseKey, NoiseStream, Quantity};
use crate::error::{Error, Result};
use crate::grad::{gp_mix_value, DenseMatrix, GradTape};
use crate::tdnn::GpVariant;

/// Per-node interpolation coefficients over the sigmoid, tanh and ReLU bases.
///
/// `lambda` is `3 × b`: row `m` holds basis `m`'s coefficient for every node. When
/// the variant is uncertain over coefficients the posterior's tied sigma is one
/// entry per basis, shared by all nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GpBasisSet {
    variant: GpVariant,
    pub lambda: ParamBlock,
}

impl GpBasisSet {
    pub fn new(variant: GpVariant, lambda: ParamBlock) -> Result<Self> {
        if lambda.shape().0 != 3 {
            return Err(Error::shape("gp lambda", (3, lambda.shape().1), lambda.shape()));
        }
        if lambda.is_gaussian() != variant.lambda_uncertain() {
            return Err(Error::Config(format!(
                "gp{} requires {} basis coefficients",
                variant.index(),
                if variant.lambda_uncertain() { "Gaussian" } else { "fixed" }
            )));
        }
        Ok(Self { variant, lambda })
    }

    /// Coefficients selecting the ReLU basis only, which reproduces a plain TDNN node.
    pub fn relu_selection(nodes: usize) -> DenseMatrix {
        DenseMatrix::from_fn(3, nodes, |m, _| if m == 2 { 1.0 } else { 0.0 })
    }

    pub fn variant(&self) -> GpVariant {
        self.variant
    }

    pub fn nodes(&self) -> usize {
        self.lambda.shape().1
    }

    pub(crate) fn collapse(&self) -> GpBasisSet {
        GpBasisSet {
            variant: GpVariant::V0,
            lambda: self.lambda.collapse(),
        }
    }
}

/// Activation-basis layer output `Σ_m lambda_m ⊙ φ_m(h · w + bias)`.
///
/// In training mode every uncertain quantity (the weight block, the coefficients)
/// consumes exactly one ε tensor keyed by `(step, layer)`; in evaluation mode both
/// collapse to their posterior means and nothing is drawn.
#[allow(clippy::too_many_arguments)]
pub fn gp_forward(
    h: &DenseMatrix,
    weight: &ParamBlock,
    bias: &[f64],
    basis: &GpBasisSet,
    noise: &NoiseStream,
    step: u64,
    layer: usize,
    eval_mode: bool,
) -> Result<DenseMatrix> {
    if weight.is_gaussian() != basis.variant.weight_uncertain() {
        return Err(Error::Config(format!(
            "gp{} weight block uncertainty does not match the variant",
            basis.variant.index()
        )));
    }
    let w = match (weight, eval_mode) {
        (ParamBlock::Gaussian(q), false) => {
            let key = NoiseKey::shared(step, DrawSite::new(layer, Quantity::Weight), 0);
            draw_gaussian(q, None, noise, key).value
        }
        _ => weight.mean().clone(),
    };
    let lambda = match (&basis.lambda, eval_mode) {
        (ParamBlock::Gaussian(q), false) => {
            let key = NoiseKey::shared(step, DrawSite::new(layer, Quantity::Lambda), 0);
            draw_gaussian(q, None, noise, key).value
        }
        (l, _) => l.mean().clone(),
    };
    let mut tape = GradTape::new();
    let hv = tape.constant(h.clone());
    let wv = tape.constant(w);
    let bv = tape.constant(DenseMatrix::row_vector(bias));
    let pre = tape.affine(hv, wv, bv)?;
    let lv = tape.constant(lambda);
    let out = tape.gp_mix(pre, lv)?;
    Ok(tape.value(out).clone())
}

/// Scalar reference for one GP node, used to cross-check the batched path.
pub fn gp_node(lambda: [f64; 3], activation_input: f64) -> f64 {
    let pre = DenseMatrix::filled(1, 1, activation_input);
    let l = DenseMatrix::from_fn(3, 1, |m, _| lambda[m]);
    gp_mix_value(&pre, &l).get(0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::GaussianVariational;
    use crate::grad::{sigmoid, Activation};

    fn fixed_basis(l: [f64; 3], nodes: usize) -> GpBasisSet {
        GpBasisSet::new(
            GpVariant::V0,
            ParamBlock::Fixed(DenseMatrix::from_fn(3, nodes, |m, _| l[m])),
        )
        .unwrap()
    }

    #[test]
    fn relu_selection_matches_relu_node() {
        let h = DenseMatrix::from_rows(&[vec![0.5, -1.0], vec![-2.0, 0.3]]).unwrap();
        let w = DenseMatrix::from_rows(&[vec![1.0, -0.5, 2.0], vec![0.25, 1.5, -1.0]]).unwrap();
        let bias = [0.1, -0.2, 0.0];
        let basis = fixed_basis([0.0, 0.0, 1.0], 3);
        let noise = NoiseStream::new(0);
        let got = gp_forward(&h, &ParamBlock::Fixed(w.clone()), &bias, &basis, &noise, 0, 0, false)
            .unwrap();
        let plain = crate::grad::affine_forward(&h, &w, &bias)
            .unwrap()
            .map(|v| Activation::Relu.apply(v));
        assert_eq!(got, plain);
        assert_eq!(noise.total_draws(), 0);
    }

    #[test]
    fn sigmoid_selection_at_zero() {
        assert_eq!(gp_node([1.0, 0.0, 0.0], 0.0), 0.5);
    }

    #[test]
    fn mixed_coefficients_match_scalar_evaluation() {
        let expected = 0.2 * sigmoid(1.0) + 0.3 * 1f64.tanh() + 0.5 * 1.0;
        let h = DenseMatrix::filled(1, 1, 1.0);
        let w = ParamBlock::Fixed(DenseMatrix::filled(1, 1, 1.0));
        let basis = fixed_basis([0.2, 0.3, 0.5], 1);
        let got = gp_forward(&h, &w, &[0.0], &basis, &NoiseStream::new(0), 0, 0, true).unwrap();
        assert!((got.get(0, 0) - expected).abs() < 1e-15);
        assert!((gp_node([0.2, 0.3, 0.5], 1.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn variant_three_draws_one_tensor_per_quantity() {
        let nodes = 4;
        let lam = GaussianVariational::at_prior(GpBasisSet::relu_selection(nodes), 0.2).unwrap();
        let basis = GpBasisSet::new(GpVariant::V3, ParamBlock::Gaussian(lam)).unwrap();
        let wq = GaussianVariational::at_prior(DenseMatrix::filled(2, nodes, 0.3), 0.1).unwrap();
        let noise = NoiseStream::new(5);
        let h = DenseMatrix::filled(3, 2, 0.5);
        let w = ParamBlock::Gaussian(wq);
        gp_forward(&h, &w, &[0.0; 4], &basis, &noise, 7, 2, false).unwrap();
        assert_eq!(noise.draws(7, DrawSite::new(2, Quantity::Weight)), 1);
        assert_eq!(noise.draws(7, DrawSite::new(2, Quantity::Lambda)), 1);
        noise.reset_counters();
        let a = gp_forward(&h, &w, &[0.0; 4], &basis, &noise, 8, 2, true).unwrap();
        let b = gp_forward(&h, &w, &[0.0; 4], &basis, &noise, 9, 2, true).unwrap();
        assert_eq!(noise.total_draws(), 0);
        assert_eq!(a, b);
    }

    #[test]
    fn variant_and_block_must_agree() {
        let lam = GaussianVariational::at_prior(GpBasisSet::relu_selection(2), 0.2).unwrap();
        assert!(GpBasisSet::new(GpVariant::V0, ParamBlock::Gaussian(lam)).is_err());
        assert!(GpBasisSet::new(
            GpVariant::V1,
            ParamBlock::Fixed(GpBasisSet::relu_selection(2))
        )
        .is_err());
        let basis = fixed_basis([0.0, 0.0, 1.0], 2);
        let wq = GaussianVariational::at_prior(DenseMatrix::filled(1, 2, 0.3), 0.1).unwrap();
        let h = DenseMatrix::filled(1, 1, 1.0);
        assert!(gp_forward(
            &h,
            &ParamBlock::Gaussian(wq),
            &[0.0; 2],
            &basis,
            &NoiseStream::new(0),
            0,
            0,
            false
        )
        .is_err());
    }
}
