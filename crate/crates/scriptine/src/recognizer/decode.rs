//! Greedy CTC decoding with per-character confidences.

use ndarray::Array2;

use super::model::Codec;
use super::{LogitMatrix, Prediction, Real};

fn softmax_rows_f64<F: Real>(logits: &LogitMatrix<F>) -> Array2<f64> {
    let (t, k) = logits.dim();
    let mut out = Array2::<f64>::zeros((t, k));
    for ti in 0..t {
        let mut max = f64::NEG_INFINITY;
        for ki in 0..k {
            max = max.max(logits[(ti, ki)].to_f64());
        }
        let mut sum = 0f64;
        for ki in 0..k {
            let e = (logits[(ti, ki)].to_f64() - max).exp();
            out[(ti, ki)] = e;
            sum += e;
        }
        for ki in 0..k {
            out[(ti, ki)] /= sum;
        }
    }
    out
}

/// Per-frame argmax, collapse repeats, drop blanks. Each emitted character
/// gets the mean softmax probability over its contiguous argmax run as
/// confidence and the run's first frame as position.
pub fn greedy_decode<F: Real>(
    logits: &LogitMatrix<F>,
    codec: &Codec,
    line_ref: impl Into<String>,
) -> Prediction {
    let probs = softmax_rows_f64(logits);
    let (t_len, classes) = probs.dim();
    let mut pred = Prediction::empty(line_ref.into());

    let mut t = 0;
    while t < t_len {
        let mut best = 0usize;
        for k in 1..classes {
            if probs[(t, k)] > probs[(t, best)] {
                best = k;
            }
        }
        // Extend the run of this argmax class.
        let start = t;
        let mut conf_sum = probs[(t, best)];
        let mut run_len = 1usize;
        t += 1;
        while t < t_len {
            let mut b2 = 0usize;
            for k in 1..classes {
                if probs[(t, k)] > probs[(t, b2)] {
                    b2 = k;
                }
            }
            if b2 != best {
                break;
            }
            conf_sum += probs[(t, best)];
            run_len += 1;
            t += 1;
        }
        if best != 0 {
            let c = codec.char_at(best).expect("decoded index within codec");
            pred.chars.push(c);
            pred.confidences.push(conf_sum / run_len as f64);
            pred.positions.push(start);
        }
    }
    debug_assert!(pred.positions.windows(2).all(|w| w[0] < w[1]));
    pred
}
