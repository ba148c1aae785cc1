//! One optimizer step: mean CTC loss over a batch, Adam with decoupled
//! weight decay, and the EMA shadow update.

use log::warn;

use super::ctc::{ctc_loss, CtcError};
use super::layers::{backward, forward_full};
use super::model::{ModelError, ModelParams, NetTensors};
use super::Real;
use crate::lineproc::LineImage;
use crate::rng::Stream;

/// Optimizer hyperparameters. The defaults are the ones used everywhere in
/// the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied directly to the weights, not through the loss.
    pub weight_decay: f64,
    pub ema_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay: 1e-5,
            ema_decay: 0.99,
        }
    }
}

/// Adam moments plus counters. One instance per training run.
#[derive(Debug, Clone)]
pub struct OptState<F> {
    pub step: u64,
    /// Samples skipped because their label cannot fit the frame count.
    pub skipped: u64,
    m: NetTensors<F>,
    v: NetTensors<F>,
}

impl<F: Real> OptState<F> {
    pub fn new(model: &ModelParams<F>) -> Self {
        OptState {
            step: 0,
            skipped: 0,
            m: model.tensors.zeros_like(),
            v: model.tensors.zeros_like(),
        }
    }
}

fn apply_update<F: Real>(
    model: &mut ModelParams<F>,
    grads: &NetTensors<F>,
    opt: &mut OptState<F>,
    hyper: &TrainHyper,
) {
    opt.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(opt.step as i32);
    let lr = F::from_f64(hyper.lr);
    let b1 = F::from_f64(hyper.beta1);
    let b2 = F::from_f64(hyper.beta2);
    let one_m_b1 = F::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = F::from_f64(1.0 - hyper.beta2);
    let eps = F::from_f64(hyper.eps);
    let decay = F::from_f64(1.0 - hyper.lr * hyper.weight_decay);
    let inv_bc1 = F::from_f64(1.0 / bc1);
    let inv_bc2 = F::from_f64(1.0 / bc2);

    let grad_views = grads.tensors();
    let mut m_views = opt.m.tensors_mut();
    let mut v_views = opt.v.tensors_mut();
    for (idx, (_, mut theta)) in model.tensors.tensors_mut().into_iter().enumerate() {
        let g = &grad_views[idx].1;
        let m = &mut m_views[idx].1;
        let v = &mut v_views[idx].1;
        ndarray::Zip::from(&mut theta)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|t, &g, m, v| {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *t = *t * decay - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }

    let raw_views = model.tensors.tensors();
    let d = F::from_f64(hyper.ema_decay);
    let one_m_d = F::from_f64(1.0 - hyper.ema_decay);
    for (idx, (_, mut ema)) in model.ema.tensors_mut().into_iter().enumerate() {
        ndarray::Zip::from(&mut ema).and(&raw_views[idx].1).for_each(|e, &t| {
            *e = d * *e + one_m_d * t;
        });
    }
}

/// Run one Adam step on the mean CTC loss of `batch`. Samples whose labels
/// cannot fit the output sequence are skipped with a counter, not an
/// error. Returns the mean loss over the samples that contributed.
pub fn train_step<F: Real>(
    model: &mut ModelParams<F>,
    batch: &[(&LineImage, &[usize])],
    opt: &mut OptState<F>,
    hyper: &TrainHyper,
    rng: &mut Stream,
) -> Result<f64, ModelError> {
    debug_assert!(!batch.is_empty());
    let mut grads = model.tensors.zeros_like();
    let mut total_loss = 0f64;
    let mut feasible = 0usize;

    for (image, label) in batch {
        if image.height() != model.input_height {
            return Err(ModelError::HeightMismatch {
                expected: model.input_height,
                got: image.height(),
            });
        }
        let (logits, cache) = forward_full(&model.tensors, &image.pixels, true, rng)?;
        match ctc_loss(&logits, label) {
            Ok((loss, dlogits)) => {
                total_loss += loss.to_f64();
                grads.add_assign(&backward(&model.tensors, &cache, &dlogits));
                feasible += 1;
            }
            Err(CtcError::Infeasible { time_steps, required }) => {
                opt.skipped += 1;
                warn!(
                    "skipping {}: label needs {required} frames, image yields {time_steps}",
                    image.source_id
                );
            }
            Err(other) => {
                return Err(ModelError::Container(format!("ctc: {other}")));
            }
        }
    }

    if feasible > 0 {
        grads.scale(F::from_f64(1.0 / feasible as f64));
        apply_update(model, &grads, opt, hyper);
    }
    model.meta.samples_seen += batch.len() as u64;
    Ok(if feasible > 0 { total_loss / feasible as f64 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_spec;
    use crate::recognizer::model::{instantiate, Codec};
    use ndarray::Array2;

    fn tiny_model(seed: u64) -> ModelParams<f64> {
        let spec = parse_spec("conv=2:3x3,pool=2x2,lstm=4,dropout=0.0").unwrap();
        let codec = Codec::new(vec!['a', 'b', 'c']).unwrap();
        instantiate(&spec, 8, codec, &mut crate::rng::keyed_stream(seed, "tiny")).unwrap()
    }

    fn tiny_image(seed: u64, w: usize) -> LineImage {
        let pixels = Array2::from_shape_fn((8, w), |(y, x)| {
            (((y * 31 + x * 17 + seed as usize * 7) % 23) as f32) / 22.0
        });
        LineImage::new(pixels, Default::default())
    }

    #[test]
    fn zero_gradient_update_is_pure_decay() {
        let mut model = tiny_model(1);
        let before = model.tensors.clone();
        let ema_before = model.ema.clone();
        let mut opt = OptState::new(&model);
        let hyper = TrainHyper::default();
        let grads = model.tensors.zeros_like();
        apply_update(&mut model, &grads, &mut opt, &hyper);
        let factor = 1.0 - hyper.lr * hyper.weight_decay;
        for ((_, t), (_, t0)) in model.tensors.tensors().iter().zip(before.tensors()) {
            for (a, b) in t.iter().zip(t0.iter()) {
                assert!((a - b * factor).abs() < 1e-15);
            }
        }
        // EMA after one step blends old shadow and new weights.
        for (((_, e), (_, e0)), (_, t)) in model
            .ema
            .tensors()
            .iter()
            .zip(ema_before.tensors())
            .zip(model.tensors.tensors())
        {
            for ((a, b), c) in e.iter().zip(e0.iter()).zip(t.iter()) {
                assert!((a - (0.99 * b + 0.01 * c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn train_step_deterministic() {
        let image = tiny_image(0, 16);
        let label = vec![1usize, 2];
        let run = || {
            let mut model = tiny_model(2);
            let mut opt = OptState::new(&model);
            let mut rng = crate::rng::keyed_stream(5, "step");
            let batch = vec![(&image, label.as_slice())];
            let loss =
                train_step(&mut model, &batch, &mut opt, &TrainHyper::default(), &mut rng)
                    .unwrap();
            (loss, model)
        };
        let (loss_a, model_a) = run();
        let (loss_b, model_b) = run();
        assert_eq!(loss_a, loss_b);
        assert_eq!(model_a.tensors, model_b.tensors);
        assert_eq!(model_a.ema, model_b.ema);
        assert_eq!(model_a.meta.samples_seen, 1);
    }

    #[test]
    fn infeasible_samples_skipped_with_counter() {
        let mut model = tiny_model(3);
        let mut opt = OptState::new(&model);
        let mut rng = crate::rng::keyed_stream(6, "skip");
        // Width 8 pools to 4 frames; a 5-character label cannot fit.
        let image = tiny_image(1, 8);
        let long_label = vec![1usize, 2, 3, 1, 2];
        let short_label = vec![1usize];
        let batch = vec![(&image, long_label.as_slice()), (&image, short_label.as_slice())];
        let before = model.tensors.clone();
        let loss =
            train_step(&mut model, &batch, &mut opt, &TrainHyper::default(), &mut rng).unwrap();
        assert_eq!(opt.skipped, 1);
        assert!(loss > 0.0);
        assert_ne!(model.tensors, before);
        assert_eq!(model.meta.samples_seen, 2);
    }

    #[test]
    fn all_infeasible_leaves_params_unchanged() {
        let mut model = tiny_model(4);
        let mut opt = OptState::new(&model);
        let mut rng = crate::rng::keyed_stream(7, "skip-all");
        let image = tiny_image(2, 8);
        let long_label = vec![1usize, 2, 3, 1, 2];
        let batch = vec![(&image, long_label.as_slice())];
        let before = model.tensors.clone();
        let loss =
            train_step(&mut model, &batch, &mut opt, &TrainHyper::default(), &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(opt.skipped, 1);
        assert_eq!(opt.step, 0);
        assert_eq!(model.tensors, before);
    }

    #[test]
    fn param_gradients_match_finite_differences_sampled() {
        // Full-coverage check lives in the acceptance suite; here a strided
        // subset keeps the unit test fast.
        let model = tiny_model(5);
        let image = tiny_image(3, 12);
        let label = vec![1usize, 3];
        let mut rng = crate::rng::keyed_stream(8, "fd");

        let (logits, cache) =
            forward_full(&model.tensors, &image.pixels, true, &mut rng).unwrap();
        let (_, dlogits) = ctc_loss(&logits, &label).unwrap();
        let grads = backward(&model.tensors, &cache, &dlogits);

        let loss_of = |net: &NetTensors<f64>| {
            let mut r = crate::rng::keyed_stream(8, "fd");
            let (logits, _) = forward_full(net, &image.pixels, true, &mut r).unwrap();
            ctc_loss(&logits, &label).unwrap().0
        };

        let mut net = model.tensors.clone();
        let h = 1e-6;
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.iter().cloned().collect()))
            .collect();
        let mut checked = 0;
        for (tensor_idx, (name, ga)) in analytic.iter().enumerate() {
            for elem in (0..ga.len()).step_by(7) {
                let orig = *net.tensors()[tensor_idx].1.iter().nth(elem).unwrap();
                *net.tensors_mut()[tensor_idx].1.iter_mut().nth(elem).unwrap() = orig + h;
                let up = loss_of(&net);
                *net.tensors_mut()[tensor_idx].1.iter_mut().nth(elem).unwrap() = orig - h;
                let down = loss_of(&net);
                *net.tensors_mut()[tensor_idx].1.iter_mut().nth(elem).unwrap() = orig;
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(ga[elem].abs()).max(1e-4);
                assert!(
                    ((fd - ga[elem]) / denom).abs() < 1e-5,
                    "{name}[{elem}]: fd {fd:.4e} analytic {:.4e}",
                    ga[elem]
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn loss_decreases_when_overfitting_one_sample() {
        let mut model = tiny_model(6);
        let mut opt = OptState::new(&model);
        let mut rng = crate::rng::keyed_stream(9, "overfit");
        let image = tiny_image(4, 20);
        let label = vec![2usize];
        let batch = vec![(&image, label.as_slice())];
        let first =
            train_step(&mut model, &batch, &mut opt, &TrainHyper::default(), &mut rng).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&mut model, &batch, &mut opt, &TrainHyper::default(), &mut rng)
                .unwrap();
        }
        assert!(last < first * 0.5, "first {first}, last {last}");
    }
}
