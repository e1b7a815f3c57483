use super::noise::{DrawSite, NoiseKey, NoiseStream, Quantity};
use crate::error::{Error, Result};
use crate::grad::{gaussian_kl_terms, DenseMatrix, GradTape, Var};

/// Affine map `x · w + b` with a `1 × out` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: DenseMatrix,
    pub b: DenseMatrix,
}

impl Affine {
    pub fn new(w: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        if b.shape() != (1, w.cols()) {
            return Err(Error::shape("affine bias", (1, w.cols()), b.shape()));
        }
        Ok(Self { w, b })
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        crate::grad::affine_forward(x, &self.w, self.b.as_slice())
    }
}

/// Latent hidden-output layer: an inference network and a prior network both read
/// `h_t` and emit a mean and a log standard deviation for the `c`-dimensional `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentOutputLayer {
    pub infer_mu: Affine,
    pub infer_log_sigma: Affine,
    pub prior_mu: Affine,
    pub prior_log_sigma: Affine,
}

/// Noise source for the latent draw of one sequence.
#[derive(Debug, Clone, Copy)]
pub enum LatentNoise<'a> {
    /// Use the inference mean, drawing nothing.
    Mean,
    Sample {
        noise: &'a NoiseStream,
        step: u64,
        sequence: u64,
        draw: u32,
    },
}

impl LatentOutputLayer {
    pub fn new(
        infer_mu: Affine,
        infer_log_sigma: Affine,
        prior_mu: Affine,
        prior_log_sigma: Affine,
    ) -> Result<Self> {
        let shape = infer_mu.w.shape();
        for a in [&infer_log_sigma, &prior_mu, &prior_log_sigma] {
            if a.w.shape() != shape {
                return Err(Error::shape("latent networks", shape, a.w.shape()));
            }
        }
        Ok(Self {
            infer_mu,
            infer_log_sigma,
            prior_mu,
            prior_log_sigma,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.infer_mu.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.infer_mu.w.cols()
    }

    /// Weight entries of the four networks.
    pub fn weight_params(&self) -> usize {
        4 * self.infer_mu.w.len()
    }

    /// Records the layer on `tape`; returns `[z_t, h_t]` and the summed KL over frames.
    pub(crate) fn record(
        &self,
        tape: &mut GradTape,
        h: Var,
        prefix: &str,
        layer: usize,
        noise: LatentNoise<'_>,
    ) -> Result<(Var, Var)> {
        let affine = |tape: &mut GradTape, name: &str, a: &Affine| -> Result<Var> {
            let w = tape.param(format!("{prefix}.{name}.w"), a.w.clone());
            let b = tape.param(format!("{prefix}.{name}.b"), a.b.clone());
            tape.affine(h, w, b)
        };
        let mu = affine(tape, "infer.mu", &self.infer_mu)?;
        let ls = affine(tape, "infer.log_sigma", &self.infer_log_sigma)?;
        let mu_r = affine(tape, "prior_net.mu", &self.prior_mu)?;
        let ls_r = affine(tape, "prior_net.log_sigma", &self.prior_log_sigma)?;
        let z = match noise {
            LatentNoise::Mean => mu,
            LatentNoise::Sample {
                noise,
                step,
                sequence,
                draw,
            } => {
                let (rows, cols) = tape.value(mu).shape();
                let key = NoiseKey {
                    step,
                    site: DrawSite::new(layer, Quantity::Latent),
                    sequence,
                    draw,
                };
                let eps = noise.standard_normal(key, rows, cols);
                tape.reparam(mu, ls, eps)?
            }
        };
        let kl = tape.gaussian_kl(mu, ls, mu_r, ls_r)?;
        let out = tape.concat_cols(z, h)?;
        Ok((out, kl))
    }
}

/// Forward pass of the latent layer for one sequence: `([z_t, h_t], KL_t per frame)`.
///
/// Training draws `z_t = mu_t + sigma_t ⊙ ε`; evaluation uses `z_t = mu_t`.
pub fn vtdnn_forward(
    h: &DenseMatrix,
    layer: &LatentOutputLayer,
    noise: &NoiseStream,
    step: u64,
    sequence: u64,
    eval_mode: bool,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let mut tape = GradTape::new();
    let hv = tape.constant(h.clone());
    let source = if eval_mode {
        LatentNoise::Mean
    } else {
        LatentNoise::Sample {
            noise,
            step,
            sequence,
            draw: 0,
        }
    };
    let (out, _) = layer.record(&mut tape, hv, "latent", 0, source)?;
    let per_frame = latent_kl_per_frame(h, layer)?;
    Ok((tape.value(out).clone(), per_frame))
}

/// Closed-form `KL(q(z_t) ‖ P_r(z_t))` for every frame.
pub fn latent_kl_per_frame(h: &DenseMatrix, layer: &LatentOutputLayer) -> Result<Vec<f64>> {
    let terms = gaussian_kl_terms(
        &layer.infer_mu.apply(h)?,
        &layer.infer_log_sigma.apply(h)?,
        &layer.prior_mu.apply(h)?,
        &layer.prior_log_sigma.apply(h)?,
    );
    Ok((0..terms.rows()).map(|t| terms.row(t).iter().sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_affine(rng: &mut ChaCha8Rng, a: usize, c: usize, scale: f64) -> Affine {
        Affine::new(
            DenseMatrix::from_fn(a, c, |_, _| scale * rng.random_range(-1.0..1.0)),
            DenseMatrix::from_fn(1, c, |_, _| scale * rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    fn random_layer(seed: u64, a: usize, c: usize) -> LatentOutputLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentOutputLayer::new(
            random_affine(&mut rng, a, c, 1.0),
            random_affine(&mut rng, a, c, 0.4),
            random_affine(&mut rng, a, c, 1.0),
            random_affine(&mut rng, a, c, 0.4),
        )
        .unwrap()
    }

    fn pdf(x: f64, m: f64, s: f64) -> f64 {
        let z = (x - m) / s;
        (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn quadrature_kl(m: f64, s: f64, mr: f64, sr: f64) -> f64 {
        let n = 20_000;
        let (lo, hi) = (m - 14.0 * s, m + 14.0 * s);
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let q = pdf(x, m, s);
            if q == 0.0 {
                0.0
            } else {
                q * (q.ln() - pdf(x, mr, sr).ln())
            }
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn identical_networks_give_zero_kl() {
        let mut layer = random_layer(1, 3, 2);
        layer.prior_mu = layer.infer_mu.clone();
        layer.prior_log_sigma = layer.infer_log_sigma.clone();
        let h = DenseMatrix::from_fn(5, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let (_, kl) = vtdnn_forward(&h, &layer, &NoiseStream::new(0), 0, 0, false).unwrap();
        assert!(kl.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn collapsing_variance_returns_mean() {
        let mut layer = random_layer(2, 3, 2);
        layer.infer_log_sigma.b = DenseMatrix::filled(1, 2, -800.0);
        layer.infer_log_sigma.w = DenseMatrix::zeros(3, 2);
        let h = DenseMatrix::from_fn(4, 3, |r, c| (r * c) as f64 * 0.1);
        let (sampled, _) = vtdnn_forward(&h, &layer, &NoiseStream::new(3), 1, 0, false).unwrap();
        let mu = layer.infer_mu.apply(&h).unwrap();
        assert_eq!(sampled.column_block(0, 2), mu);
        assert_eq!(sampled.column_block(2, 3), h);
    }

    #[test]
    fn per_frame_kl_matches_quadrature() {
        let layer = random_layer(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = DenseMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let kl = latent_kl_per_frame(&h, &layer).unwrap();
        let mu = layer.infer_mu.apply(&h).unwrap();
        let ls = layer.infer_log_sigma.apply(&h).unwrap();
        let mr = layer.prior_mu.apply(&h).unwrap();
        let lsr = layer.prior_log_sigma.apply(&h).unwrap();
        for t in 0..6 {
            let oracle: f64 = (0..3)
                .map(|j| {
                    quadrature_kl(mu.get(t, j), ls.get(t, j).exp(), mr.get(t, j), lsr.get(t, j).exp())
                })
                .sum();
            assert!((kl[t] - oracle).abs() < 1e-8, "frame {t}: {} vs {oracle}", kl[t]);
        }
    }

    #[test]
    fn eval_mode_draws_nothing() {
        let layer = random_layer(5, 2, 2);
        let noise = NoiseStream::new(1);
        let h = DenseMatrix::filled(3, 2, 0.2);
        let (a, _) = vtdnn_forward(&h, &layer, &noise, 0, 0, true).unwrap();
        let (b, _) = vtdnn_forward(&h, &layer, &noise, 1, 0, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(noise.total_draws(), 0);
    }
}
