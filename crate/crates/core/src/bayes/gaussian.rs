use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grad::DenseMatrix;

/// Gaussian posterior `N(mu, sigma²)` over a weight block with one tied `sigma = exp(rho)`
/// per row, and a per-weight Gaussian prior.
///
/// Rows index the input dimension of the block, so a row's sigma is shared by every
/// hidden node the input feeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVariational {
    pub mu: DenseMatrix,
    /// `rows × 1` log standard deviations.
    pub rho: DenseMatrix,
    pub prior_mu: DenseMatrix,
    pub prior_sigma: DenseMatrix,
}

impl GaussianVariational {
    pub fn new(mu: DenseMatrix, sigma: f64, prior_mu: DenseMatrix, prior_sigma: f64) -> Result<Self> {
        let (rows, cols) = mu.shape();
        Self::from_parts(
            mu,
            DenseMatrix::filled(rows, 1, sigma.ln()),
            prior_mu,
            DenseMatrix::filled(rows, cols, prior_sigma),
        )
    }

    pub fn from_parts(
        mu: DenseMatrix,
        rho: DenseMatrix,
        prior_mu: DenseMatrix,
        prior_sigma: DenseMatrix,
    ) -> Result<Self> {
        if prior_mu.shape() != mu.shape() {
            return Err(Error::shape("gaussian prior_mu", mu.shape(), prior_mu.shape()));
        }
        if prior_sigma.shape() != mu.shape() {
            return Err(Error::shape("gaussian prior_sigma", mu.shape(), prior_sigma.shape()));
        }
        if rho.shape() != (mu.rows(), 1) {
            return Err(Error::shape("gaussian rho", (mu.rows(), 1), rho.shape()));
        }
        if prior_sigma.as_slice().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("prior sigma must be positive".into()));
        }
        Ok(Self {
            mu,
            rho,
            prior_mu,
            prior_sigma,
        })
    }

    /// Posterior equal to its prior with the given tied sigma.
    pub fn at_prior(prior_mu: DenseMatrix, prior_sigma: f64) -> Result<Self> {
        Self::new(prior_mu.clone(), prior_sigma, prior_mu, prior_sigma)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }

    #[inline]
    pub fn sigma(&self, row: usize) -> f64 {
        self.rho.get(row, 0).exp()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.mu.rows()).map(|r| self.sigma(r)).collect()
    }

    /// Number of free hyper-parameters: one mean per weight plus one sigma per row.
    pub fn free_params(&self) -> usize {
        self.mu.len() + self.rho.len()
    }
}

fn check_eps(q: &GaussianVariational, eps: &DenseMatrix, op: &'static str) -> Result<()> {
    if eps.shape() != q.shape() {
        return Err(Error::shape(op, q.shape(), eps.shape()));
    }
    Ok(())
}

/// `w = mu + sigma ⊙ eps` with the row sigma broadcast across columns.
pub fn sample_weights(q: &GaussianVariational, eps: &DenseMatrix) -> Result<DenseMatrix> {
    check_eps(q, eps, "sample_weights")?;
    let (rows, cols) = q.shape();
    let mut w = q.mu.clone();
    for r in 0..rows {
        let s = q.sigma(r);
        for c in 0..cols {
            let v = w.get(r, c) + s * eps.get(r, c);
            w.set(r, c, v);
        }
    }
    Ok(w)
}

/// Mixture weight and fixed narrow-component scale of the dropout posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesDropoutConfig {
    /// Probability of keeping the learned component.
    pub keep: f64,
    pub sigma1: f64,
}

impl Default for BayesDropoutConfig {
    fn default() -> Self {
        Self {
            keep: 0.5,
            sigma1: (-3.0f64).exp(),
        }
    }
}

impl BayesDropoutConfig {
    pub fn new(keep: f64, sigma1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep) || !(sigma1 > 0.0) {
            return Err(Error::Config(format!(
                "dropout keep {keep} must lie in [0,1] and sigma1 {sigma1} must be positive"
            )));
        }
        Ok(Self { keep, sigma1 })
    }
}

/// `w = a(mu + sigma0 ⊙ eps) + (1 − a)(sigma1 ⊙ eps)` with one shared `eps`.
pub fn sample_weights_bayes_dropout(
    q: &GaussianVariational,
    cfg: &BayesDropoutConfig,
    eps: &DenseMatrix,
) -> Result<DenseMatrix> {
    check_eps(q, eps, "sample_weights_bayes_dropout")?;
    let a = cfg.keep;
    let (rows, cols) = q.shape();
    let mut w = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        let s0 = q.sigma(r);
        for c in 0..cols {
            let e = eps.get(r, c);
            w.set(r, c, a * (q.mu.get(r, c) + s0 * e) + (1.0 - a) * (cfg.sigma1 * e));
        }
    }
    Ok(w)
}

/// Classic dropout posterior: each weight keeps its mean with probability `keep`,
/// otherwise it is replaced by a draw from `N(0, sigma1²)`.
pub fn standard_dropout_mask<R: Rng + ?Sized>(
    mu: &DenseMatrix,
    keep: f64,
    sigma1: f64,
    rng: &mut R,
) -> DenseMatrix {
    let noise = Normal::new(0.0, sigma1).expect("positive sigma1");
    DenseMatrix::from_fn(mu.rows(), mu.cols(), |r, c| {
        if rng.random::<f64>() < keep {
            mu.get(r, c)
        } else {
            noise.sample(rng)
        }
    })
}

/// Closed-form `KL(q ‖ prior)`, tied sigmas expanded to one term per weight.
pub fn kl_gaussian(q: &GaussianVariational) -> f64 {
    let (rows, cols) = q.shape();
    let mut total = 0.0;
    for r in 0..rows {
        let s = q.sigma(r);
        let var = s * s;
        for c in 0..cols {
            let sr = q.prior_sigma.get(r, c);
            let d = q.mu.get(r, c) - q.prior_mu.get(r, c);
            total += (sr / s).ln() + (var + d * d) / (2.0 * sr * sr) - 0.5;
        }
    }
    total
}

/// Gaussian-prior KL approximation for the dropout mixture posterior.
///
/// The additive constant is `Σ_j (½ − log sigma_r,j)`, which makes the value exactly
/// [`kl_gaussian`] when `keep = 1`.
pub fn kl_bayes_dropout(q: &GaussianVariational, cfg: &BayesDropoutConfig) -> f64 {
    let a = cfg.keep;
    let s1 = cfg.sigma1;
    let (rows, cols) = q.shape();
    let mut kept = 0.0;
    let mut dropped = 0.0;
    let mut constant = 0.0;
    for r in 0..rows {
        let s0 = q.sigma(r);
        for c in 0..cols {
            let sr = q.prior_sigma.get(r, c);
            let d = q.mu.get(r, c) - q.prior_mu.get(r, c);
            let var_r = sr * sr;
            kept += (s0 * s0 + d * d) / (2.0 * var_r) - s0.ln();
            dropped += s1 * s1 / (2.0 * var_r) - s1.ln();
            constant += 0.5 - sr.ln();
        }
    }
    a * kept + (1.0 - a) * dropped - constant
}

/// Reparameterization chain from a sampled-weight gradient to `(∂/∂mu, ∂/∂sigma_row)`.
///
/// `keep` is 1 for a plain Gaussian posterior and `a` for the dropout mixture.
pub fn reparam_mc_grads(
    grad_w: &DenseMatrix,
    eps: &DenseMatrix,
    keep: f64,
) -> Result<(DenseMatrix, Vec<f64>)> {
    if grad_w.shape() != eps.shape() {
        return Err(Error::shape("reparam_mc_grads", grad_w.shape(), eps.shape()));
    }
    let grad_mu = if keep == 1.0 {
        grad_w.clone()
    } else {
        grad_w.scale(keep)
    };
    let grad_sigma = (0..grad_w.rows())
        .map(|r| {
            keep * grad_w
                .row(r)
                .iter()
                .zip(eps.row(r))
                .map(|(g, e)| g * e)
                .sum::<f64>()
        })
        .collect();
    Ok((grad_mu, grad_sigma))
}

/// Gradients of `MC term − kl_scale · KL` with respect to `(mu, rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrads {
    pub mu: DenseMatrix,
    /// Per-row gradient with respect to the tied sigma.
    pub sigma: Vec<f64>,
    /// Per-row gradient with respect to `rho = ln sigma`, shaped like `rho`.
    pub rho: DenseMatrix,
}

fn hyper_grads(
    mc_grad_mu: &DenseMatrix,
    mc_grad_sigma: &[f64],
    q: &GaussianVariational,
    weight: f64,
) -> Result<HyperGrads> {
    if mc_grad_mu.shape() != q.shape() {
        return Err(Error::shape("elbo_hyperparam_grads", q.shape(), mc_grad_mu.shape()));
    }
    if mc_grad_sigma.len() != q.mu.rows() {
        return Err(Error::shape(
            "elbo_hyperparam_grads sigma",
            (q.mu.rows(), 1),
            (mc_grad_sigma.len(), 1),
        ));
    }
    let (rows, cols) = q.shape();
    let mut mu = mc_grad_mu.clone();
    let mut sigma = mc_grad_sigma.to_vec();
    let mut rho = DenseMatrix::zeros(rows, 1);
    for r in 0..rows {
        let s = q.sigma(r);
        let mut ds = 0.0;
        for c in 0..cols {
            let sr = q.prior_sigma.get(r, c);
            let var_r = sr * sr;
            let d = q.mu.get(r, c) - q.prior_mu.get(r, c);
            let g = mu.get(r, c) - weight * d / var_r;
            mu.set(r, c, g);
            ds += (s * s - var_r) / (s * var_r);
        }
        sigma[r] -= weight * ds;
        rho.set(r, 0, sigma[r] * s);
    }
    Ok(HyperGrads { mu, sigma, rho })
}

/// ELBO gradients for a Gaussian posterior.
///
/// The mean's KL part is the exact derivative of the closed-form KL, so its
/// denominator is the prior variance.
pub fn elbo_hyperparam_grads(
    mc_grad_mu: &DenseMatrix,
    mc_grad_sigma: &[f64],
    q: &GaussianVariational,
    kl_scale: f64,
) -> Result<HyperGrads> {
    hyper_grads(mc_grad_mu, mc_grad_sigma, q, kl_scale)
}

/// ELBO gradients for the dropout mixture: the KL part is scaled by `keep`.
pub fn bayes_dropout_hyperparam_grads(
    mc_grad_mu: &DenseMatrix,
    mc_grad_sigma: &[f64],
    q: &GaussianVariational,
    cfg: &BayesDropoutConfig,
    kl_scale: f64,
) -> Result<HyperGrads> {
    hyper_grads(mc_grad_mu, mc_grad_sigma, q, kl_scale * cfg.keep)
}

/// Implicit step on `weight · KL(q ‖ prior)` with step size `step`.
///
/// The mean update is the exact minimizer of `½‖mu − mu₀‖²/step + weight·KL`; the
/// rho update solves the matching one-dimensional problem per row by Newton's method.
/// Stays stable for arbitrarily narrow priors, where an explicit gradient step
/// of the same size would diverge.
pub fn kl_proximal_step(q: &mut GaussianVariational, weight: f64, step: f64) {
    if weight == 0.0 || step == 0.0 {
        return;
    }
    let (rows, cols) = q.shape();
    for r in 0..rows {
        let mut inv_var_sum = 0.0;
        for c in 0..cols {
            let sr = q.prior_sigma.get(r, c);
            let var_r = sr * sr;
            inv_var_sum += 1.0 / var_r;
            let k = step * weight / var_r;
            let mu = (q.mu.get(r, c) + k * q.prior_mu.get(r, c)) / (1.0 + k);
            q.mu.set(r, c, mu);
        }
        // (rho − rho0)/step + weight·(A e^{2rho} − n) = 0, convex and increasing in rho
        let rho0 = q.rho.get(r, 0);
        let a = weight * inv_var_sum;
        let n = weight * cols as f64;
        let mut rho = rho0 + step * n;
        for _ in 0..100 {
            let e = (2.0 * rho).exp();
            let f = (rho - rho0) / step + a * e - n;
            let df = 1.0 / step + 2.0 * a * e;
            let next = rho - f / df;
            if (next - rho).abs() <= 1e-15 * rho.abs().max(1.0) {
                rho = next;
                break;
            }
            rho = next;
        }
        q.rho.set(r, 0, rho);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn std_normal_pdf(x: f64, mu: f64, s: f64) -> f64 {
        let z = (x - mu) / s;
        (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Composite Simpson quadrature of a one-dimensional KL integrand.
    fn quadrature_kl(mu: f64, s: f64, mr: f64, sr: f64) -> f64 {
        let n = 20_000;
        let lo = mu - 14.0 * s;
        let hi = mu + 14.0 * s;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let q = std_normal_pdf(x, mu, s);
            if q == 0.0 {
                return 0.0;
            }
            q * (q.ln() - std_normal_pdf(x, mr, sr).ln())
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn single(mu: f64, sigma: f64, mr: f64, sr: f64) -> GaussianVariational {
        GaussianVariational::new(
            DenseMatrix::filled(1, 1, mu),
            sigma,
            DenseMatrix::filled(1, 1, mr),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn zero_and_unit_noise() {
        let q = single(0.7, 0.3, 0.0, 1.0);
        assert_eq!(sample_weights(&q, &DenseMatrix::zeros(1, 1)).unwrap(), q.mu);
        let q = single(0.0, 1.0, 0.0, 1.0);
        let w = sample_weights(&q, &DenseMatrix::filled(1, 1, 0.5)).unwrap();
        assert_eq!(w.get(0, 0), 0.5);
        assert!(sample_weights(&q, &DenseMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn empirical_mean_of_draws() {
        let mu = DenseMatrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap();
        let q = GaussianVariational::new(mu.clone(), 0.4, mu.clone(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut acc = DenseMatrix::zeros(2, 2);
        for _ in 0..n {
            let eps = DenseMatrix::from_fn(2, 2, |_, _| StandardNormal.sample(&mut rng));
            acc.add_assign(&sample_weights(&q, &eps).unwrap()).unwrap();
        }
        let mean = acc.scale(1.0 / n as f64);
        let bound = 3.0 * 0.4 / (n as f64).sqrt();
        assert!(mean.max_abs_diff(&mu) < bound);
    }

    #[test]
    fn bayes_dropout_reductions() {
        let mu = DenseMatrix::from_rows(&[vec![0.5, -1.0, 0.25]]).unwrap();
        let q = GaussianVariational::new(mu.clone(), 0.3, mu.clone(), 1.0).unwrap();
        let eps = DenseMatrix::row_vector(&[0.1, -2.0, 1.3]);
        let keep_all = BayesDropoutConfig::new(1.0, 0.05).unwrap();
        assert_eq!(
            sample_weights_bayes_dropout(&q, &keep_all, &eps).unwrap(),
            sample_weights(&q, &eps).unwrap()
        );
        let drop_all = BayesDropoutConfig::new(0.0, 0.05).unwrap();
        let w = sample_weights_bayes_dropout(&q, &drop_all, &DenseMatrix::zeros(1, 3)).unwrap();
        assert!(w.as_slice().iter().all(|&v| v == 0.0));
        let q2 = GaussianVariational::from_parts(
            DenseMatrix::filled(1, 1, 2.0),
            DenseMatrix::filled(1, 1, f64::NEG_INFINITY),
            DenseMatrix::filled(1, 1, 0.0),
            DenseMatrix::filled(1, 1, 1.0),
        )
        .unwrap();
        let half = BayesDropoutConfig {
            keep: 0.5,
            sigma1: 0.0,
        };
        let w = sample_weights_bayes_dropout(&q2, &half, &DenseMatrix::filled(1, 1, 0.8)).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
    }

    #[test]
    fn standard_dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mu = DenseMatrix::filled(1000, 1000, 3.0);
        let same = standard_dropout_mask(&mu, 1.0, (-3.0f64).exp(), &mut rng);
        assert_eq!(same, mu);

        let sigma1 = (-3.0f64).exp();
        let dropped = standard_dropout_mask(&mu, 0.0, sigma1, &mut rng);
        let n = dropped.len() as f64;
        let mean = dropped.sum() / n;
        let var = dropped.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / (sigma1 * sigma1) - 1.0).abs() < 0.05, "variance {var}");

        let a = 0.3;
        let mixed = standard_dropout_mask(&mu, a, sigma1, &mut rng);
        let kept = mixed.as_slice().iter().filter(|&&v| v == 3.0).count() as f64 / n;
        assert!((kept - a).abs() < 3.0 * (a * (1.0 - a) / n).sqrt());
    }

    #[test]
    fn kl_values_against_quadrature() {
        assert!(kl_gaussian(&single(0.3, 0.7, 0.3, 0.7)).abs() < 1e-12);
        let k = kl_gaussian(&single(1.0, 1.0, 0.0, 1.0));
        assert!((k - 0.5).abs() < 1e-12);
        assert!((k - quadrature_kl(1.0, 1.0, 0.0, 1.0)).abs() < 1e-8);
        let k = kl_gaussian(&single(0.0, 2.0, 0.0, 1.0));
        assert!((k - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-12);
        assert!((k - 0.806853).abs() < 1e-6);
        assert!((k - quadrature_kl(0.0, 2.0, 0.0, 1.0)).abs() < 1e-8);
    }

    #[test]
    fn tied_sigma_expands_per_weight() {
        let mu = DenseMatrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let q = GaussianVariational::new(mu.clone(), 0.8, DenseMatrix::zeros(2, 3), 1.5).unwrap();
        let mut expected = 0.0;
        for r in 0..2 {
            for c in 0..3 {
                expected += kl_gaussian(&single(mu.get(r, c), 0.8, 0.0, 1.5));
            }
        }
        assert!((kl_gaussian(&q) - expected).abs() < 1e-12);
    }

    #[test]
    fn dropout_kl_reduces_to_gaussian_kl() {
        let mu = DenseMatrix::from_rows(&[vec![0.4, -0.2], vec![1.0, 2.0]]).unwrap();
        let q = GaussianVariational::new(mu, 0.6, DenseMatrix::zeros(2, 2), 0.9).unwrap();
        let cfg = BayesDropoutConfig::new(1.0, (-3.0f64).exp()).unwrap();
        assert!((kl_bayes_dropout(&q, &cfg) - kl_gaussian(&q)).abs() < 1e-10);
        let at_prior = GaussianVariational::at_prior(DenseMatrix::filled(2, 2, 0.3), 0.9).unwrap();
        assert!(kl_bayes_dropout(&at_prior, &cfg).abs() < 1e-12);
    }

    /// The mixture approximation ignores the entropy of the mixing indicator; for
    /// well-separated components the exact KL differs from it by
    /// `a ln a + (1 − a) ln(1 − a)` per weight (plus `(1 − a)·mu_r²/(2 sigma_r²)`, zero here).
    #[test]
    fn dropout_kl_against_monte_carlo() {
        let (mu, s0, s1, a) = (3.0, 0.5, (-3.0f64).exp(), 0.5);
        let q = single(mu, s0, 0.0, 1.0);
        let cfg = BayesDropoutConfig::new(a, s1).unwrap();
        let approx = kl_bayes_dropout(&q, &cfg);

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 1_000_000;
        let log_q = |x: f64| {
            (a * std_normal_pdf(x, mu, s0) + (1.0 - a) * std_normal_pdf(x, 0.0, s1)).ln()
        };
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let x = if rng.random::<f64>() < a { mu + s0 * e } else { s1 * e };
            let v = log_q(x) - std_normal_pdf(x, 0.0, 1.0).ln();
            acc += v;
            acc_sq += v * v;
        }
        let mc = acc / n as f64;
        let se = ((acc_sq / n as f64 - mc * mc) / n as f64).sqrt();
        let gap = a * a.ln() + (1.0 - a) * (1.0 - a).ln();
        assert!(
            (mc - (approx + gap)).abs() < 4.0 * se + 1e-3,
            "mc {mc} approx {approx} gap {gap} se {se}"
        );
    }

    #[test]
    fn hyper_grads_reductions() {
        let q = GaussianVariational::at_prior(DenseMatrix::filled(2, 3, 0.4), 0.7).unwrap();
        let g = elbo_hyperparam_grads(&DenseMatrix::zeros(2, 3), &[0.0, 0.0], &q, 1.0).unwrap();
        assert!(g.mu.as_slice().iter().all(|&v| v.abs() < 1e-15));
        assert!(g.rho.as_slice().iter().all(|&v| v.abs() < 1e-12));

        let q = GaussianVariational::new(
            DenseMatrix::filled(2, 3, 0.9),
            0.3,
            DenseMatrix::zeros(2, 3),
            0.7,
        )
        .unwrap();
        let mc = DenseMatrix::from_fn(2, 3, |r, c| (r + c) as f64 * 0.1);
        let g = elbo_hyperparam_grads(&mc, &[0.2, -0.1], &q, 0.0).unwrap();
        assert_eq!(g.mu, mc);
        assert_eq!(g.sigma, vec![0.2, -0.1]);
    }

    /// Finite differences of `Σ c ⊙ w(eps frozen) − kl_scale·KL` through rho and mu.
    #[test]
    fn hyper_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let shape = (3, 4);
        let rand_m = |rng: &mut ChaCha8Rng| {
            DenseMatrix::from_fn(shape.0, shape.1, |_, _| rng.random_range(-1.0..1.0))
        };
        let mu = rand_m(&mut rng);
        let prior_mu = rand_m(&mut rng);
        let prior_sigma = DenseMatrix::from_fn(3, 4, |_, _| rng.random_range(0.3..1.2));
        let rho = DenseMatrix::from_fn(3, 1, |_, _| rng.random_range(-1.5..0.0));
        let eps = rand_m(&mut rng);
        let coef = rand_m(&mut rng);
        let kl_scale = 0.37;

        for keep in [1.0, 0.5] {
            let cfg = BayesDropoutConfig::new(keep, (-3.0f64).exp()).unwrap();
            let objective = |q: &GaussianVariational| {
                let w = sample_weights_bayes_dropout(q, &cfg, &eps).unwrap();
                let data: f64 = w.as_slice().iter().zip(coef.as_slice()).map(|(a, b)| a * b).sum();
                data - kl_scale * kl_bayes_dropout(q, &cfg)
            };
            let q = GaussianVariational::from_parts(
                mu.clone(),
                rho.clone(),
                prior_mu.clone(),
                prior_sigma.clone(),
            )
            .unwrap();
            let (mc_mu, mc_sigma) = reparam_mc_grads(&coef, &eps, keep).unwrap();
            let g = bayes_dropout_hyperparam_grads(&mc_mu, &mc_sigma, &q, &cfg, kl_scale).unwrap();
            let h = 1e-6;
            for idx in 0..q.mu.len() {
                let mut up = q.clone();
                up.mu.as_mut_slice()[idx] += h;
                let mut dn = q.clone();
                dn.mu.as_mut_slice()[idx] -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                let an = g.mu.as_slice()[idx];
                assert!((an - fd).abs() / an.abs().max(1.0) < 1e-4, "mu {idx}: {an} vs {fd}");
            }
            for r in 0..3 {
                let mut up = q.clone();
                up.rho.set(r, 0, q.rho.get(r, 0) + h);
                let mut dn = q.clone();
                dn.rho.set(r, 0, q.rho.get(r, 0) - h);
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                let an = g.rho.get(r, 0);
                assert!((an - fd).abs() / an.abs().max(1.0) < 1e-4, "rho {r}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn proximal_step_minimizes_its_objective() {
        let q0 = GaussianVariational::from_parts(
            DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.0]]).unwrap(),
            DenseMatrix::from_rows(&[vec![-0.5], vec![0.3]]).unwrap(),
            DenseMatrix::from_rows(&[vec![0.0, 0.1], vec![0.2, -0.3]]).unwrap(),
            DenseMatrix::from_rows(&[vec![0.5, 0.8], vec![1.1, 0.4]]).unwrap(),
        )
        .unwrap();
        let (weight, step) = (0.7, 0.2);
        let mut q = q0.clone();
        kl_proximal_step(&mut q, weight, step);
        let objective = |p: &GaussianVariational| {
            let dm = p.mu.sub(&q0.mu).unwrap().sum_squares();
            let dr = p.rho.sub(&q0.rho).unwrap().sum_squares();
            (dm + dr) / (2.0 * step) + weight * kl_gaussian(p)
        };
        let best = objective(&q);
        let h = 1e-4;
        for idx in 0..4 {
            for sign in [-1.0, 1.0] {
                let mut p = q.clone();
                p.mu.as_mut_slice()[idx] += sign * h;
                assert!(objective(&p) >= best);
            }
        }
        for r in 0..2 {
            for sign in [-1.0, 1.0] {
                let mut p = q.clone();
                p.rho.set(r, 0, q.rho.get(r, 0) + sign * h);
                assert!(objective(&p) >= best);
            }
        }
    }

    #[test]
    fn proximal_step_with_narrow_prior_pins_mean() {
        let prior = DenseMatrix::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let mut q = GaussianVariational::new(
            DenseMatrix::from_rows(&[vec![0.8, 0.1]]).unwrap(),
            1e-6,
            prior.clone(),
            1e-6,
        )
        .unwrap();
        kl_proximal_step(&mut q, 1e-3, 1e-2);
        assert!(q.mu.max_abs_diff(&prior) < 1e-6);
        assert!(q.sigma(0).is_finite() && q.sigma(0) > 0.0);
    }
}
