//! Focal loss over logits, with analytic gradients.
//!
//! Per example with softmax probability p_t at the true class:
//!
//!   L = -(1 - p_t)^gamma * ln(p_t)
//!
//! gamma = 0 is special-cased to plain cross-entropy so the two are
//! bit-for-bit identical. Targets equal to `ignore` contribute nothing;
//! the loss is the mean over the remaining rows.

use crate::ssl::Mat;
use crate::Scalar;

use super::{Result, SuperviseError};

fn softmax_row<S: Scalar>(logits: &[S], out: &mut [S]) {
    let max = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut sum = S::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean focal loss and dL/d(logits) for a batch of rows.
pub fn focal_loss<S: Scalar>(
    logits: &Mat<S>,
    targets: &[u16],
    gamma: S,
    ignore: u16,
) -> Result<(S, Mat<S>)> {
    if logits.rows() != targets.len() {
        return Err(SuperviseError::Shape(format!(
            "{} logit rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let k = logits.cols();
    let count = targets.iter().filter(|&&t| t != ignore).count();
    if count == 0 {
        return Err(SuperviseError::NoLabeledPixels);
    }
    let inv_count = S::one() / S::from_usize(count).unwrap();

    let mut grad = Mat::zeros(logits.rows(), k);
    let mut loss = S::zero();
    let mut probs = vec![S::zero(); k];
    for (r, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let t = t as usize;
        if t >= k {
            return Err(SuperviseError::LabelOutOfRange { label: t as u16, classes: k });
        }
        softmax_row(logits.row(r), &mut probs);
        let pt = probs[t];
        if gamma == S::zero() {
            // Exact cross-entropy.
            loss += -pt.ln() * inv_count;
            for c in 0..k {
                let delta = if c == t { S::one() } else { S::zero() };
                grad.set(r, c, (probs[c] - delta) * inv_count);
            }
        } else {
            let f = (S::one() - pt).powf(gamma);
            loss += -f * pt.ln() * inv_count;
            // dL/dp_t, then through the softmax: dp_t/dz_c = p_t(d_tc - p_c).
            let dl_dpt = gamma * (S::one() - pt).powf(gamma - S::one()) * pt.ln() - f / pt;
            for c in 0..k {
                let delta = if c == t { S::one() } else { S::zero() };
                grad.set(r, c, dl_dpt * pt * (delta - probs[c]) * inv_count);
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::IGNORE_LABEL;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn equal_binary_logits_at_gamma_two() {
        // p_t = 0.5: loss = (1 - 0.5)^2 * ln 2 = 0.25 ln 2.
        let logits = Mat::from_vec(1, 2, vec![1.3, 1.3]);
        let (loss, _) = focal_loss(&logits, &[0], 2.0, IGNORE_LABEL).unwrap();
        assert!((loss - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_exact_cross_entropy() {
        let logits = random_logits(8, 5, 1);
        let targets: Vec<u16> = (0..8).map(|i| (i % 5) as u16).collect();
        let (loss, grad) = focal_loss(&logits, &targets, 0.0, IGNORE_LABEL).unwrap();
        // Independent cross-entropy.
        let mut expected = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            expected += lse - row[t as usize];
        }
        expected /= 8.0;
        assert!((loss - expected).abs() < 1e-12);
        // CE gradient: (softmax - onehot) / n.
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            for c in 0..5 {
                let p = (row[c] - max).exp() / sum;
                let delta = if c == t as usize { 1.0 } else { 0.0 };
                assert!((grad.get(r, c) - (p - delta) / 8.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (case, gamma) in [(0u64, 0.0), (1, 0.5), (2, 2.0), (3, 3.0)] {
            let logits = random_logits(6, 4, case + 10);
            let targets: Vec<u16> = (0..6).map(|i| ((i * 3) % 4) as u16).collect();
            let (_, grad) = focal_loss(&logits, &targets, gamma, IGNORE_LABEL).unwrap();
            let eps = 1e-6;
            for idx in 0..24 {
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus.data_mut()[idx] += eps;
                minus.data_mut()[idx] -= eps;
                let lp = focal_loss(&plus, &targets, gamma, IGNORE_LABEL).unwrap().0;
                let lm = focal_loss(&minus, &targets, gamma, IGNORE_LABEL).unwrap().0;
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - grad.data()[idx]).abs() < 1e-5,
                    "gamma {gamma} idx {idx}: {fd} vs {}",
                    grad.data()[idx]
                );
            }
        }
    }

    #[test]
    fn ignored_rows_are_excluded_from_the_mean() {
        let logits = random_logits(4, 3, 5);
        let targets = [0u16, IGNORE_LABEL, 1, IGNORE_LABEL];
        let (loss, grad) = focal_loss(&logits, &targets, 2.0, IGNORE_LABEL).unwrap();
        let kept = Mat::from_vec(
            2,
            3,
            logits.row(0).iter().chain(logits.row(2)).cloned().collect(),
        );
        let (expected, _) = focal_loss(&kept, &[0, 1], 2.0, IGNORE_LABEL).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
        assert!(grad.row(3).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = random_logits(2, 3, 6);
        let err = focal_loss(&logits, &[IGNORE_LABEL, IGNORE_LABEL], 2.0, IGNORE_LABEL);
        assert!(matches!(err, Err(SuperviseError::NoLabeledPixels)));
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let logits = random_logits(1, 3, 7);
        let err = focal_loss(&logits, &[7], 2.0, IGNORE_LABEL);
        assert!(matches!(err, Err(SuperviseError::LabelOutOfRange { label: 7, classes: 3 })));
    }
}
