//! CTC loss via the forward-backward recursion in log space, with the
//! exact gradient with respect to the logits, plus a brute-force path
//! enumeration used as an independent test oracle.

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::Real;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CtcError {
    #[error("label needs at least {required} frames but the input has {time_steps}")]
    Infeasible { time_steps: usize, required: usize },
    #[error("label index {index} out of range for {classes} classes (0 is the blank)")]
    BadLabelIndex { index: usize, classes: usize },
    #[error("{states} paths exceed the brute-force enumeration budget")]
    TooLarge { states: u64 },
}

fn log_sum_exp2<F: Real>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (F::one() + (lo - hi).exp()).ln()
}

fn log_sum_exp3<F: Real>(a: F, b: F, c: F) -> F {
    log_sum_exp2(log_sum_exp2(a, b), c)
}

fn log_softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter() {
            sum = sum + (*v - max).exp();
        }
        let log_z = max + sum.ln();
        row.mapv_inplace(|v| v - log_z);
    }
    out
}

/// Minimum number of frames a label needs: its length plus one separating
/// blank per adjacent repeated character.
fn min_frames(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

/// Negative log-likelihood of `label` under per-frame `logits` (time-major,
/// class 0 = blank), and the exact gradient of the loss with respect to
/// the logits.
pub fn ctc_loss<F: Real>(
    logits: &Array2<F>,
    label: &[usize],
) -> Result<(F, Array2<F>), CtcError> {
    let (t_len, classes) = logits.dim();
    for &idx in label {
        if idx == 0 || idx >= classes {
            return Err(CtcError::BadLabelIndex { index: idx, classes });
        }
    }
    let required = min_frames(label);
    if t_len < required {
        return Err(CtcError::Infeasible { time_steps: t_len, required });
    }

    let lp = log_softmax_rows(logits);

    // Extended label with blanks around every character.
    let s_len = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 1 { label[s / 2] } else { 0 })
        .collect();
    let neg_inf = F::neg_infinity();

    // Skipping from s-2 to s is allowed when s is a character that differs
    // from the character two positions back.
    let can_skip: Vec<bool> = (0..s_len)
        .map(|s| ext[s] != 0 && s >= 2 && ext[s] != ext[s - 2])
        .collect();

    let mut alpha = Array2::<F>::from_elem((t_len, s_len), neg_inf);
    alpha[(0, 0)] = lp[(0, ext[0])];
    if s_len > 1 {
        alpha[(0, 1)] = lp[(0, ext[1])];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1, s)];
            let step = if s >= 1 { alpha[(t - 1, s - 1)] } else { neg_inf };
            let skip = if can_skip[s] { alpha[(t - 1, s - 2)] } else { neg_inf };
            let total = log_sum_exp3(stay, step, skip);
            if total != neg_inf {
                alpha[(t, s)] = lp[(t, ext[s])] + total;
            }
        }
    }

    let mut beta = Array2::<F>::from_elem((t_len, s_len), neg_inf);
    beta[(t_len - 1, s_len - 1)] = lp[(t_len - 1, ext[s_len - 1])];
    if s_len > 1 {
        beta[(t_len - 1, s_len - 2)] = lp[(t_len - 1, ext[s_len - 2])];
    }
    for t in (0..t_len.saturating_sub(1)).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1, s)];
            let step = if s + 1 < s_len { beta[(t + 1, s + 1)] } else { neg_inf };
            let skip = if s + 2 < s_len && can_skip[s + 2] {
                beta[(t + 1, s + 2)]
            } else {
                neg_inf
            };
            let total = log_sum_exp3(stay, step, skip);
            if total != neg_inf {
                beta[(t, s)] = lp[(t, ext[s])] + total;
            }
        }
    }

    let log_p = if s_len > 1 {
        log_sum_exp2(alpha[(t_len - 1, s_len - 1)], alpha[(t_len - 1, s_len - 2)])
    } else {
        alpha[(t_len - 1, s_len - 1)]
    };
    if log_p == neg_inf {
        return Err(CtcError::Infeasible { time_steps: t_len, required });
    }

    // grad = softmax - gamma, where gamma[t][k] sums the posterior over
    // extended-label positions emitting k. Alpha and beta both carry the
    // emission at t, so one copy is divided out.
    let mut grad = lp.mapv(|v| v.exp());
    let mut gamma_t = Array1::<F>::from_elem(classes, neg_inf);
    for t in 0..t_len {
        gamma_t.fill(neg_inf);
        for s in 0..s_len {
            let a = alpha[(t, s)];
            let b = beta[(t, s)];
            if a == neg_inf || b == neg_inf {
                continue;
            }
            let contrib = a + b - lp[(t, ext[s])] - log_p;
            gamma_t[ext[s]] = log_sum_exp2(gamma_t[ext[s]], contrib);
        }
        for k in 0..classes {
            if gamma_t[k] != neg_inf {
                grad[(t, k)] = grad[(t, k)] - gamma_t[k].exp();
            }
        }
    }

    Ok((-log_p, grad))
}

/// Sum over every frame-level path whose blank-collapse equals `label`;
/// exponential in `T`, guarded to stay below a million paths. Independent
/// oracle for [`ctc_loss`]: takes per-frame probabilities, returns the
/// negative log of the total path mass.
pub fn ctc_loss_bruteforce(probs: &Array2<f64>, label: &[usize]) -> Result<f64, CtcError> {
    let (t_len, classes) = probs.dim();
    for &idx in label {
        if idx == 0 || idx >= classes {
            return Err(CtcError::BadLabelIndex { index: idx, classes });
        }
    }
    let states = (classes as u64).checked_pow(t_len as u32).unwrap_or(u64::MAX);
    if states > 1_000_000 {
        return Err(CtcError::TooLarge { states });
    }

    let mut total = 0f64;
    let mut path = vec![0usize; t_len];
    for mut id in 0..states {
        for slot in path.iter_mut() {
            *slot = (id % classes as u64) as usize;
            id /= classes as u64;
        }
        // Collapse: merge repeats, then drop blanks.
        let mut collapsed = Vec::with_capacity(t_len);
        let mut prev = usize::MAX;
        for &k in &path {
            if k != prev && k != 0 {
                collapsed.push(k);
            }
            prev = k;
        }
        if collapsed == label {
            let p: f64 = path.iter().enumerate().map(|(t, &k)| probs[(t, k)]).product();
            total += p;
        }
    }
    Ok(-total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
        let mut out = logits.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.mapv_inplace(|v| (v - max).exp() / sum);
        }
        out
    }

    #[test]
    fn single_frame_single_char() {
        // Softmax of these logits is (0.25, 0.75).
        let logits = Array2::from_shape_vec((1, 2), vec![0.0, (3.0f64).ln()]).unwrap();
        let (loss, _) = ctc_loss(&logits, &[1]).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn two_frames_uniform() {
        // Uniform 0.5/0.5 over {blank, a}: paths (a,a), (a,-), (-,a) sum
        // to 0.75.
        let logits = Array2::zeros((2, 2));
        let (loss, _) = ctc_loss::<f64>(&logits, &[1]).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12, "{loss}");
        let bf = ctc_loss_bruteforce(&softmax_rows(&logits), &[1]).unwrap();
        assert!((loss - bf).abs() < 1e-12);
    }

    #[test]
    fn empty_label_is_all_blanks() {
        let logits = Array2::zeros((3, 3)); // uniform 1/3
        let (loss, _) = ctc_loss::<f64>(&logits, &[]).unwrap();
        let expected = -(1.0f64 / 27.0).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_char_needs_separating_blank() {
        let logits = Array2::<f64>::zeros((2, 2));
        assert_eq!(
            ctc_loss(&logits, &[1, 1]),
            Err(CtcError::Infeasible { time_steps: 2, required: 3 })
        );
        let logits3 = Array2::<f64>::zeros((3, 2));
        // Only path (a, -, a): probability 1/8.
        let (loss, _) = ctc_loss(&logits3, &[1, 1]).unwrap();
        assert!((loss - 3.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn blank_in_label_rejected() {
        let logits = Array2::<f64>::zeros((2, 2));
        assert_eq!(
            ctc_loss(&logits, &[0]),
            Err(CtcError::BadLabelIndex { index: 0, classes: 2 })
        );
    }

    #[test]
    fn bruteforce_guard_refuses_large_instances() {
        let probs = Array2::from_elem((30, 4), 0.25);
        assert!(matches!(
            ctc_loss_bruteforce(&probs, &[1]),
            Err(CtcError::TooLarge { .. })
        ));
    }

    fn random_feasible_case(
        rng: &mut crate::rng::Stream,
    ) -> (Array2<f64>, Vec<usize>) {
        loop {
            let t = rng.gen_range(1..=8);
            let k = rng.gen_range(2..=4);
            let l = rng.gen_range(0..=3.min(t));
            let label: Vec<usize> = (0..l).map(|_| rng.gen_range(1..k)).collect();
            if t >= min_frames(&label) {
                let logits =
                    Array2::from_shape_simple_fn((t, k), || rng.gen_range(-2.0..2.0));
                return (logits, label);
            }
        }
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = crate::rng::keyed_stream(33, "ctc-oracle");
        for case in 0..200 {
            let (logits, label) = random_feasible_case(&mut rng);
            let (loss, _) = ctc_loss(&logits, &label).unwrap();
            let bf = ctc_loss_bruteforce(&softmax_rows(&logits), &label).unwrap();
            assert!(
                (loss - bf).abs() < 1e-9,
                "case {case}: dp {loss} vs brute force {bf} (label {label:?})"
            );
        }
    }

    #[test]
    fn gradient_matches_directional_derivative() {
        let mut rng = crate::rng::keyed_stream(34, "ctc-grad");
        for case in 0..100 {
            let (logits, label) = random_feasible_case(&mut rng);
            let (_, grad) = ctc_loss(&logits, &label).unwrap();
            let dir = Array2::from_shape_simple_fn(logits.dim(), || {
                rng.gen_range(-1.0..1.0)
            });
            let h = 1e-6;
            let up = ctc_loss(&(&logits + &dir.mapv(|v| v * h)), &label).unwrap().0;
            let down = ctc_loss(&(&logits - &dir.mapv(|v| v * h)), &label).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let analytic = (&grad * &dir).sum();
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-6,
                "case {case}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn forward_and_backward_mass_agree() {
        // Internal consistency: total probability from alpha equals the
        // posterior normalization at every frame (gamma sums to one, i.e.
        // grad rows sum to zero).
        let mut rng = crate::rng::keyed_stream(35, "ctc-mass");
        for _ in 0..50 {
            let (logits, label) = random_feasible_case(&mut rng);
            let (_, grad) = ctc_loss(&logits, &label).unwrap();
            for row in grad.rows() {
                let sum: f64 = row.iter().sum();
                assert!(sum.abs() < 1e-9, "row sum {sum}");
            }
        }
    }
}
