use crate::error::{Error, Result};
use crate::grad::DenseMatrix;

pub const SEMI_ORTHOGONAL_TOLERANCE: f64 = 1e-6;
pub const SEMI_ORTHOGONAL_MAX_ITERATIONS: usize = 20;

/// `‖X·Xᵀ − I‖_F` where `X` is `m` oriented so its rows are the smaller dimension.
pub fn semi_orthogonal_residual(m: &DenseMatrix) -> f64 {
    let x = short_side(m);
    gram_residual(&x)
}

fn short_side(m: &DenseMatrix) -> DenseMatrix {
    if m.rows() > m.cols() {
        m.transpose()
    } else {
        m.clone()
    }
}

fn gram_residual(x: &DenseMatrix) -> f64 {
    let mut g = x.matmul_t(x).expect("square gram");
    for i in 0..g.rows() {
        let v = g.get(i, i) - 1.0;
        g.set(i, i, v);
    }
    g.frobenius_norm()
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power iteration.
fn top_eigenvalue(g: &DenseMatrix) -> f64 {
    let n = g.rows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 * 0.7).sin()).collect();
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w: Vec<f64> = (0..n)
            .map(|i| g.row(i).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-13 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Drives `M` toward `M·Mᵀ = I` (on its short side) with `M ← M − ½(M·Mᵀ − I)·M`.
///
/// When the largest singular value exceeds one the matrix is first rescaled to unit
/// spectral norm, which keeps every singular value inside the iteration's basin of
/// attraction `(0, √3)` and makes the fixed point the positive orthonormal factor.
pub fn apply_semi_orthogonal_constraint(m: &DenseMatrix) -> Result<DenseMatrix> {
    let transposed = m.rows() > m.cols();
    let mut x = short_side(m);
    let mut residual = gram_residual(&x);
    if residual <= SEMI_ORTHOGONAL_TOLERANCE {
        return Ok(m.clone());
    }
    let top = top_eigenvalue(&x.matmul_t(&x)?).sqrt();
    if top > 1.0 {
        x = x.scale(1.0 / top);
        residual = gram_residual(&x);
    }
    let mut iterations = 0;
    while residual > SEMI_ORTHOGONAL_TOLERANCE {
        if iterations == SEMI_ORTHOGONAL_MAX_ITERATIONS {
            return Err(Error::NonConvergence {
                residual,
                iterations,
            });
        }
        let mut p = x.matmul_t(&x)?;
        for i in 0..p.rows() {
            let v = p.get(i, i) - 1.0;
            p.set(i, i, v);
        }
        let correction = p.matmul(&x)?;
        x.axpy(-0.5, &correction)?;
        residual = gram_residual(&x);
        iterations += 1;
    }
    Ok(if transposed { x.transpose() } else { x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gram-Schmidt on the rows; the independent oracle for the orthonormal factor.
    fn orthonormalize_rows(m: &DenseMatrix) -> DenseMatrix {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for r in 0..m.rows() {
            let mut v = m.row(r).to_vec();
            for q in &rows {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= dot * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rows.push(v.iter().map(|x| x / n).collect());
        }
        DenseMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn orthonormal_rows_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = DenseMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let q = orthonormalize_rows(&raw);
        let out = apply_semi_orthogonal_constraint(&q).unwrap();
        assert!(out.max_abs_diff(&q) <= 1e-12);
    }

    #[test]
    fn random_matrix_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DenseMatrix::from_fn(4, 8, |_, _| rng.random_range(-0.5..0.5));
        let out = apply_semi_orthogonal_constraint(&m).unwrap();
        assert!(semi_orthogonal_residual(&out) <= 1e-6);
    }

    #[test]
    fn scaled_orthonormal_recovers_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = DenseMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let q = orthonormalize_rows(&raw);
        let out = apply_semi_orthogonal_constraint(&q.scale(2.0)).unwrap();
        assert!(out.max_abs_diff(&q) < 1e-6);
    }

    #[test]
    fn tall_matrices_use_their_short_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = DenseMatrix::from_fn(12, 4, |_, _| rng.random_range(-0.5..0.5));
        let out = apply_semi_orthogonal_constraint(&m).unwrap();
        assert_eq!(out.shape(), (12, 4));
        let g = out.t_matmul(&out).unwrap();
        assert!(g.max_abs_diff(&DenseMatrix::identity(4)) < 1e-6);
    }

    #[test]
    fn rank_deficient_reports_residual() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        match apply_semi_orthogonal_constraint(&m) {
            Err(Error::NonConvergence { residual, iterations }) => {
                assert!(residual > 1e-6);
                assert_eq!(iterations, SEMI_ORTHOGONAL_MAX_ITERATIONS);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
