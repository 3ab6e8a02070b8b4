//! Sequence-to-sequence loss (softmax or stablemax normalizer), halting-head
//! binary cross-entropy, and prediction helpers. Positions whose target is
//! the pad token are excluded from the loss.

use crate::error::{HrmError, Result};
use crate::num::{sigmoid, Real};
use crate::PAD_TOKEN;
use ndarray::Array2;

/// Stablemax normalizer: `s(x) = x + 1` for `x >= 0`, `1 / (1 - x)` below.
/// Strictly increasing, so it never changes the argmax.
pub fn stablemax_s<F: Real>(x: F) -> F {
    if x >= F::zero() {
        x + F::one()
    } else {
        (F::one() - x).recip()
    }
}

fn stablemax_s_grad<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one()
    } else {
        let r = (F::one() - x).recip();
        r * r
    }
}

/// Normalize a score vector with the stablemax transform.
pub fn stablemax<F: Real>(logits: &[F]) -> Vec<F> {
    let s: Vec<F> = logits.iter().map(|&x| stablemax_s(x)).collect();
    let total = s.iter().fold(F::zero(), |a, &b| a + b);
    s.into_iter().map(|v| v / total).collect()
}

pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total = e.iter().fold(F::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / total).collect()
}

/// Mean negative log-likelihood over non-pad target positions, and its
/// gradient with respect to the logits.
pub fn sequence_loss_grad<F: Real>(
    logits: &Array2<F>,
    targets: &[u16],
    use_stablemax: bool,
) -> Result<(F, Array2<F>)> {
    if logits.nrows() != targets.len() {
        return Err(HrmError::Input(format!(
            "logits rows {} != target length {}",
            logits.nrows(),
            targets.len()
        )));
    }
    let vocab = logits.ncols();
    let supervised = targets.iter().filter(|&&t| t != PAD_TOKEN).count();
    if supervised == 0 {
        return Err(HrmError::Input(
            "sequence loss undefined: every target position is padded".into(),
        ));
    }
    let inv_n = F::c(1.0 / supervised as f64);
    let mut loss = F::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for (p, &t) in targets.iter().enumerate() {
        if t == PAD_TOKEN {
            continue;
        }
        let y = t as usize;
        debug_assert!(y < vocab);
        let row = logits.row(p);
        if use_stablemax {
            let mut total = F::zero();
            for &x in row.iter() {
                total += stablemax_s(x);
            }
            let sy = stablemax_s(row[y]);
            loss += (total / sy).ln();
            for (j, &x) in row.iter().enumerate() {
                let mut g = stablemax_s_grad(x) / total;
                if j == y {
                    g -= stablemax_s_grad(x) / sy;
                }
                grad[[p, j]] = g * inv_n;
            }
        } else {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for &x in row.iter() {
                total += (x - max).exp();
            }
            loss += total.ln() + max - row[y];
            for (j, &x) in row.iter().enumerate() {
                let mut g = (x - max).exp() / total;
                if j == y {
                    g -= F::one();
                }
                grad[[p, j]] = g * inv_n;
            }
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(HrmError::Numeric(format!("non-finite sequence loss {loss}")));
    }
    Ok((loss, grad))
}

/// Mean binary cross-entropy over the two halting outputs, computed from
/// logits for stability; also returns the gradient on the logits.
pub fn bce_with_logits_grad<F: Real>(q_logits: (F, F), targets: (F, F)) -> (F, (F, F)) {
    let one_term = |l: F, g: F| {
        let loss = l.max(F::zero()) - l * g + (F::one() + (-l.abs()).exp()).ln();
        let grad = sigmoid(l) - g;
        (loss, grad)
    };
    let (lh, gh) = one_term(q_logits.0, targets.0);
    let (lc, gc) = one_term(q_logits.1, targets.1);
    let half = F::c(0.5);
    ((lh + lc) * half, (gh * half, gc * half))
}

/// Greedy per-position decoding.
pub fn argmax_rows<F: Real>(logits: &Array2<F>) -> Vec<u16> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best as u16
        })
        .collect()
}

/// Exact sequence match over non-pad target positions.
pub fn exact_match(pred: &[u16], targets: &[u16]) -> bool {
    targets
        .iter()
        .zip(pred.iter())
        .all(|(&t, &p)| t == PAD_TOKEN || p == t)
}

/// Fraction of non-pad target positions predicted correctly.
pub fn token_accuracy(pred: &[u16], targets: &[u16]) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (&t, &p) in targets.iter().zip(pred.iter()) {
        if t != PAD_TOKEN {
            total += 1;
            if p == t {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn stablemax_uniform_on_zeros() {
        let p = stablemax(&[0.0f64; 4]);
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn stablemax_direct_formula() {
        let p = stablemax(&[1.0f64, -1.0]);
        assert!((p[0] - 0.8).abs() < 1e-12);
        assert!((p[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn stablemax_sums_to_one_and_positive() {
        let mut rng = seeded(2);
        for _ in 0..100 {
            let v: Vec<f64> = (0..9).map(|_| rng.random_range(-20.0..20.0)).collect();
            let p = stablemax(&v);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn stablemax_preserves_argmax_of_softmax() {
        let mut rng = seeded(3);
        for _ in 0..500 {
            let v: Vec<f64> = (0..11).map(|_| rng.random_range(-30.0..30.0)).collect();
            let arg = |p: &[f64]| {
                p.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(arg(&stablemax(&v)), arg(&softmax(&v)));
        }
    }

    #[test]
    fn perfect_logits_drive_loss_to_zero() {
        let mut logits = Array2::<f64>::zeros((3, 4));
        let targets = [1u16, 3, 2];
        for (p, &t) in targets.iter().enumerate() {
            logits[[p, t as usize]] = 100.0;
        }
        let (soft, _) = sequence_loss_grad(&logits, &targets, false).unwrap();
        assert!(soft < 1e-10, "softmax loss {soft}");

        for (p, &t) in targets.iter().enumerate() {
            logits[[p, t as usize]] = 1e9;
        }
        let (stable, _) = sequence_loss_grad(&logits, &targets, true).unwrap();
        assert!(stable < 1e-7, "stablemax loss {stable}");
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Array2::<f64>::zeros((5, 7));
        let targets = [1u16, 2, 3, 4, 5];
        for use_stable in [false, true] {
            let (l, _) = sequence_loss_grad(&logits, &targets, use_stable).unwrap();
            assert!((l - (7f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = seeded(4);
        let logits = Array2::from_shape_fn((6, 9), |_| rng.random_range(-4.0..4.0));
        let targets: Vec<u16> = (0..6).map(|_| rng.random_range(1..9u16)).collect();
        // Pad one position to exercise masking.
        let mut targets = targets;
        targets[2] = PAD_TOKEN;

        let (l, _) = sequence_loss_grad(&logits, &targets, false).unwrap();
        let mut oracle = 0.0;
        let mut n = 0;
        for (p, &t) in targets.iter().enumerate() {
            if t == PAD_TOKEN {
                continue;
            }
            let row: Vec<f64> = logits.row(p).iter().cloned().collect();
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            oracle += -(row[t as usize].exp() / z).ln();
            n += 1;
        }
        oracle /= n as f64;
        assert!((l - oracle).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = seeded(5);
        for use_stable in [false, true] {
            let logits = Array2::from_shape_fn((4, 6), |_| rng.random_range(-3.0..3.0));
            let targets: Vec<u16> = (0..4).map(|_| rng.random_range(1..6u16)).collect();
            let (_, grad) = sequence_loss_grad(&logits, &targets, use_stable).unwrap();
            let h = 1e-6;
            for idx in [(0, 0), (1, 3), (3, 5), (2, 2)] {
                let mut lp = logits.clone();
                lp[idx] += h;
                let mut lm = logits.clone();
                lm[idx] -= h;
                let (fp, _) = sequence_loss_grad(&lp, &targets, use_stable).unwrap();
                let (fm, _) = sequence_loss_grad(&lm, &targets, use_stable).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - grad[idx]).abs() < 1e-6,
                    "stable={use_stable} {idx:?}: fd {fd} vs {}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn all_padded_targets_is_an_input_error() {
        let logits = Array2::<f64>::zeros((3, 4));
        assert!(sequence_loss_grad(&logits, &[0, 0, 0], false).is_err());
    }

    #[test]
    fn bce_matches_hand_computed_oracle() {
        let q = (0.3f64, -1.2);
        let g = (1.0, 0.0);
        let (loss, _) = bce_with_logits_grad(q, g);
        let p = |l: f64| 1.0 / (1.0 + (-l).exp());
        let oracle = (-(p(q.0).ln()) + -((1.0 - p(q.1)).ln())) / 2.0;
        assert!((loss - oracle).abs() < 1e-10);
        assert!(loss >= 0.0);
    }

    #[test]
    fn bce_minimum_at_exact_targets() {
        // Binary targets and saturated logits drive the loss to zero.
        let (loss, _) = bce_with_logits_grad((40.0f64, -40.0), (1.0, 0.0));
        assert!(loss < 1e-12);
    }
}
