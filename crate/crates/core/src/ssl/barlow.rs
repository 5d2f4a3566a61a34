//! Redundancy-reduction pair loss.
//!
//! Given two batches of embeddings P, Q (one row per pixel pair), each
//! column is standardized (optionally mean-centered, always L2-normalized)
//! and the cross-correlation C = P̂ᵀQ̂ is formed. The loss pulls the
//! diagonal toward 1 and the off-diagonal toward 0:
//!
//!   L = Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²
//!
//! The backward pass is analytic, differentiating through the
//! standardization.

use crate::Scalar;

use super::mat::Mat;
use super::{Result, SslError};

struct Standardized<S> {
    xhat: Mat<S>,
    norms: Vec<S>,
}

/// Per-column standardization: subtract the column mean when `center` is
/// set, then divide by the column L2 norm. A zero-norm column is an error
/// naming the offending dimension.
fn standardize<S: Scalar>(m: &Mat<S>, center: bool) -> Result<Standardized<S>> {
    let (n, d) = (m.rows(), m.cols());
    let mut xhat = Mat::zeros(n, d);
    let mut norms = vec![S::zero(); d];
    for j in 0..d {
        let mean = if center {
            (0..n).map(|r| m.get(r, j)).sum::<S>() / S::from_usize(n).unwrap()
        } else {
            S::zero()
        };
        let mut norm_sq = S::zero();
        for r in 0..n {
            let x = m.get(r, j) - mean;
            xhat.set(r, j, x);
            norm_sq += x * x;
        }
        let norm = norm_sq.sqrt();
        if !(norm > S::zero()) || !norm.is_finite() {
            return Err(SslError::ZeroVariance { dim: j });
        }
        norms[j] = norm;
        for r in 0..n {
            xhat.set(r, j, xhat.get(r, j) / norm);
        }
    }
    Ok(Standardized { xhat, norms })
}

fn correlation_of<S: Scalar>(p: &Standardized<S>, q: &Standardized<S>) -> Mat<S> {
    let (n, d) = (p.xhat.rows(), p.xhat.cols());
    let mut c = Mat::zeros(d, d);
    for r in 0..n {
        let prow = p.xhat.row(r);
        let qrow = q.xhat.row(r);
        for i in 0..d {
            for j in 0..d {
                c.add_assign(i, j, prow[i] * qrow[j]);
            }
        }
    }
    c
}

/// Cross-correlation matrix of two embedding batches.
pub fn cross_correlation<S: Scalar>(p: &Mat<S>, q: &Mat<S>, center: bool) -> Result<Mat<S>> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(SslError::Shape(format!(
            "P is {}x{}, Q is {}x{}",
            p.rows(),
            p.cols(),
            q.rows(),
            q.cols()
        )));
    }
    Ok(correlation_of(&standardize(p, center)?, &standardize(q, center)?))
}

/// Loss value for a given correlation matrix.
pub fn barlow_loss<S: Scalar>(c: &Mat<S>, lambda: S) -> S {
    let d = c.rows();
    let mut loss = S::zero();
    for i in 0..d {
        for j in 0..d {
            let v = c.get(i, j);
            if i == j {
                let r = S::one() - v;
                loss += r * r;
            } else {
                loss += lambda * v * v;
            }
        }
    }
    loss
}

pub struct BarlowGrads<S> {
    pub dp: Mat<S>,
    pub dq: Mat<S>,
}

/// Backward through the standardization of one batch. `g` is dL/dx̂.
fn standardize_backward<S: Scalar>(s: &Standardized<S>, g: &Mat<S>, center: bool) -> Mat<S> {
    let (n, d) = (g.rows(), g.cols());
    let mut dx = Mat::zeros(n, d);
    for j in 0..d {
        let dot = (0..n).map(|r| s.xhat.get(r, j) * g.get(r, j)).sum::<S>();
        for r in 0..n {
            dx.set(r, j, (g.get(r, j) - s.xhat.get(r, j) * dot) / s.norms[j]);
        }
        if center {
            let mean = (0..n).map(|r| dx.get(r, j)).sum::<S>() / S::from_usize(n).unwrap();
            for r in 0..n {
                dx.set(r, j, dx.get(r, j) - mean);
            }
        }
    }
    dx
}

/// Loss plus analytic gradients with respect to the raw embeddings.
pub fn barlow_backward<S: Scalar>(
    p: &Mat<S>,
    q: &Mat<S>,
    lambda: S,
    center: bool,
) -> Result<(S, BarlowGrads<S>)> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(SslError::Shape(format!(
            "P is {}x{}, Q is {}x{}",
            p.rows(),
            p.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let ps = standardize(p, center)?;
    let qs = standardize(q, center)?;
    let c = correlation_of(&ps, &qs);
    let loss = barlow_loss(&c, lambda);

    // dL/dC.
    let d = c.rows();
    let mut g = Mat::zeros(d, d);
    let two = S::from_f64(2.0).unwrap();
    for i in 0..d {
        for j in 0..d {
            if i == j {
                g.set(i, j, -two * (S::one() - c.get(i, j)));
            } else {
                g.set(i, j, two * lambda * c.get(i, j));
            }
        }
    }

    // dL/dP̂ = Q̂ Gᵀ, dL/dQ̂ = P̂ G.
    let n = p.rows();
    let mut gp = Mat::zeros(n, d);
    let mut gq = Mat::zeros(n, d);
    for r in 0..n {
        for i in 0..d {
            let mut acc_p = S::zero();
            let mut acc_q = S::zero();
            for j in 0..d {
                acc_p += g.get(i, j) * qs.xhat.get(r, j);
                acc_q += ps.xhat.get(r, j) * g.get(j, i);
            }
            gp.set(r, i, acc_p);
            gq.set(r, i, acc_q);
        }
    }

    let dp = standardize_backward(&ps, &gp, center);
    let dq = standardize_backward(&qs, &gq, center);
    Ok((loss, BarlowGrads { dp, dq }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_off_diagonal_pair_value() {
        let c = Mat::from_vec(2, 2, vec![1.0f64, 0.5, 0.5, 1.0]);
        assert!((barlow_loss(&c, 0.005) - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn identity_correlation_has_zero_loss() {
        let mut c = Mat::zeros(4, 4);
        for i in 0..4 {
            c.set(i, i, 1.0);
        }
        assert_eq!(barlow_loss(&c, 0.005), 0.0);
    }

    #[test]
    fn self_correlation_diagonal_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_mat(16, 5, &mut rng);
        let c = cross_correlation(&p, &p, true).unwrap();
        for i in 0..5 {
            assert!((c.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_errors_when_centered_only() {
        let p = Mat::from_vec(3, 2, vec![1.0, 0.3, 1.0, -0.2, 1.0, 0.9]);
        let q = Mat::from_vec(3, 2, vec![0.1, 0.3, 0.5, -0.2, -0.4, 0.9]);
        match cross_correlation(&p, &q, true) {
            Err(SslError::ZeroVariance { dim }) => assert_eq!(dim, 0),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
        cross_correlation(&p, &q, false).unwrap();
    }

    #[test]
    fn uncentered_mode_uses_literal_normalization() {
        // One column, all entries equal: C = (x·y)/(|x||y|) with no mean
        // subtraction.
        let p = Mat::from_vec(2, 1, vec![3.0f64, 4.0]);
        let q = Mat::from_vec(2, 1, vec![4.0f64, 3.0]);
        let c = cross_correlation(&p, &q, false).unwrap();
        assert!((c.get(0, 0) - 24.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..20 {
            let n = rng.gen_range(4..16);
            let d = rng.gen_range(1..6);
            let center = case % 2 == 0;
            let p = random_mat(n, d, &mut rng);
            let q = random_mat(n, d, &mut rng);
            let (_, grads) = barlow_backward(&p, &q, 0.005, center).unwrap();
            let eps = 1e-6;
            for (mat, grad, is_p) in [(&p, &grads.dp, true), (&q, &grads.dq, false)] {
                for idx in 0..n * d {
                    let mut plus = mat.clone();
                    let mut minus = mat.clone();
                    plus.data_mut()[idx] += eps;
                    minus.data_mut()[idx] -= eps;
                    let (lp, lm) = if is_p {
                        (
                            barlow_backward(&plus, &q, 0.005, center).unwrap().0,
                            barlow_backward(&minus, &q, 0.005, center).unwrap().0,
                        )
                    } else {
                        (
                            barlow_backward(&p, &plus, 0.005, center).unwrap().0,
                            barlow_backward(&p, &minus, 0.005, center).unwrap().0,
                        )
                    };
                    let fd = (lp - lm) / (2.0 * eps);
                    assert!(
                        (fd - grad.data()[idx]).abs() < 1e-6,
                        "case {case} idx {idx}: fd {fd} vs analytic {}",
                        grad.data()[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Mat::<f64>::zeros(4, 3);
        let q = Mat::<f64>::zeros(4, 2);
        assert!(matches!(cross_correlation(&p, &q, true), Err(SslError::Shape(_))));
    }
}
