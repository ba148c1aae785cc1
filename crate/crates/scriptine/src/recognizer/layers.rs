//! Forward pass and exact backward pass for the network layers.
//!
//! Feature layout is `[channels, height, width]` through the convolutional
//! stack. At the first LSTM (or at the projection, if there is none) the
//! map is flattened time-major to `[width, channels * height]`, column
//! `c * height + h` holding channel `c` at row `h`.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;

use super::model::{LayerParams, LstmDir, ModelError, NetTensors};
use super::{LogitMatrix, ModelParams, Real};
use crate::lineproc::LineImage;
use crate::rng::Stream;

enum Feat<F> {
    Spatial(Array3<F>),
    Seq(Array2<F>),
}

pub(super) struct LstmDirCache<F> {
    /// Input sequence in processing order (reversed for the backward
    /// direction).
    x: Array2<F>,
    i: Array2<F>,
    f: Array2<F>,
    g: Array2<F>,
    o: Array2<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
    h: Array2<F>,
    reversed: bool,
}

enum StepCache<F> {
    Conv {
        x_cols: Array2<F>,
        relu_mask: Array2<F>,
        in_dims: (usize, usize, usize),
        out_dims: (usize, usize, usize),
    },
    Pool {
        /// Flat input index of the max element, one per output element.
        argmax: Vec<usize>,
        in_dims: (usize, usize, usize),
        out_dims: (usize, usize, usize),
    },
    /// Spatial -> sequence transition, no parameters.
    Flatten { channels: usize, height: usize, width: usize },
    Lstm { fwd: LstmDirCache<F>, bwd: LstmDirCache<F> },
    DropoutSeq { mask: Array2<F> },
    DropoutSpatial { mask: Array3<F> },
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<F> {
    steps: Vec<(usize, StepCache<F>)>,
    proj_input: Array2<F>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn conv_forward<F: Real>(
    input: &Array3<F>,
    w: &ndarray::Array4<F>,
    b: &Array1<F>,
) -> (Array3<F>, StepCache<F>) {
    let (in_c, in_h, in_w) = input.dim();
    let (filters, _, kh, kw) = w.dim();
    // Zero "same" padding; even kernels pad one extra at the bottom/right.
    let ph0 = (kh - 1) / 2;
    let pw0 = (kw - 1) / 2;
    let mut padded = Array3::<F>::zeros((in_c, in_h + kh - 1, in_w + kw - 1));
    padded
        .slice_mut(s![.., ph0..ph0 + in_h, pw0..pw0 + in_w])
        .assign(input);

    let ckk = in_c * kh * kw;
    let mut x_cols = Array2::<F>::zeros((ckk, in_h * in_w));
    for c in 0..in_c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for y in 0..in_h {
                    for x in 0..in_w {
                        x_cols[(row, y * in_w + x)] = padded[(c, y + dy, x + dx)];
                    }
                }
            }
        }
    }

    let w_mat = w.to_shape((filters, ckk)).expect("conv weight is contiguous");
    let mut y_mat = w_mat.dot(&x_cols);
    for (mut row, &bias) in y_mat.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let relu_mask = y_mat.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
    y_mat.zip_mut_with(&relu_mask, |v, &m| *v = *v * m);
    let out = y_mat
        .into_shape_with_order((filters, in_h, in_w))
        .expect("conv output reshape");
    (
        out,
        StepCache::Conv {
            x_cols,
            relu_mask,
            in_dims: (in_c, in_h, in_w),
            out_dims: (filters, in_h, in_w),
        },
    )
}

fn conv_backward<F: Real>(
    dy: &Array3<F>,
    w: &ndarray::Array4<F>,
    cache: &StepCache<F>,
) -> (ndarray::Array4<F>, Array1<F>, Array3<F>) {
    let StepCache::Conv { x_cols, relu_mask, in_dims, out_dims } = cache else {
        unreachable!("conv cache")
    };
    let (in_c, in_h, in_w) = *in_dims;
    let (filters, _, _) = *out_dims;
    let (_, _, kh, kw) = w.dim();
    let ckk = in_c * kh * kw;

    let mut dy_mat = dy
        .to_shape((filters, in_h * in_w))
        .expect("conv grad reshape")
        .into_owned();
    dy_mat.zip_mut_with(relu_mask, |v, &m| *v = *v * m);

    let dw_mat = dy_mat.dot(&x_cols.t());
    let dw = dw_mat
        .into_shape_with_order((filters, in_c, kh, kw))
        .expect("conv weight grad reshape");
    let db = dy_mat.sum_axis(Axis(1));

    let w_mat = w.to_shape((filters, ckk)).expect("conv weight is contiguous");
    let dx_cols = w_mat.t().dot(&dy_mat);

    let ph0 = (kh - 1) / 2;
    let pw0 = (kw - 1) / 2;
    let mut dpadded = Array3::<F>::zeros((in_c, in_h + kh - 1, in_w + kw - 1));
    for c in 0..in_c {
        for dyk in 0..kh {
            for dxk in 0..kw {
                let row = (c * kh + dyk) * kw + dxk;
                for y in 0..in_h {
                    for x in 0..in_w {
                        let v = dx_cols[(row, y * in_w + x)];
                        dpadded[(c, y + dyk, x + dxk)] = dpadded[(c, y + dyk, x + dxk)] + v;
                    }
                }
            }
        }
    }
    let dx = dpadded.slice(s![.., ph0..ph0 + in_h, pw0..pw0 + in_w]).to_owned();
    (dw, db, dx)
}

fn pool_forward<F: Real>(
    input: &Array3<F>,
    ph: usize,
    pw: usize,
) -> Result<(Array3<F>, StepCache<F>), ModelError> {
    let (c, h, w) = input.dim();
    debug_assert_eq!(h % ph, 0);
    let out_h = h / ph;
    let out_w = w / pw;
    if out_w == 0 {
        return Err(ModelError::TooNarrow { width: w });
    }
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    let mut argmax = vec![0usize; c * out_h * out_w];
    for ci in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = F::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let (y, x) = (oy * ph + dy, ox * pw + dx);
                        let v = input[(ci, y, x)];
                        if v > best {
                            best = v;
                            best_idx = (ci * h + y) * w + x;
                        }
                    }
                }
                out[(ci, oy, ox)] = best;
                argmax[(ci * out_h + oy) * out_w + ox] = best_idx;
            }
        }
    }
    Ok((
        out,
        StepCache::Pool { argmax, in_dims: (c, h, w), out_dims: (c, out_h, out_w) },
    ))
}

fn pool_backward<F: Real>(dy: &Array3<F>, cache: &StepCache<F>) -> Array3<F> {
    let StepCache::Pool { argmax, in_dims, out_dims } = cache else {
        unreachable!("pool cache")
    };
    let (c, h, w) = *in_dims;
    let (_, out_h, out_w) = *out_dims;
    let mut dx = Array3::<F>::zeros((c, h, w));
    let dx_flat = dx.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let src = argmax[(ci * out_h + oy) * out_w + ox];
                dx_flat[src] = dx_flat[src] + dy[(ci, oy, ox)];
            }
        }
    }
    dx
}

fn flatten_forward<F: Real>(input: &Array3<F>) -> Array2<F> {
    let (c, h, w) = input.dim();
    let mut out = Array2::<F>::zeros((w, c * h));
    for ci in 0..c {
        for y in 0..h {
            for t in 0..w {
                out[(t, ci * h + y)] = input[(ci, y, t)];
            }
        }
    }
    out
}

fn flatten_backward<F: Real>(dseq: &Array2<F>, c: usize, h: usize, w: usize) -> Array3<F> {
    let mut out = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for t in 0..w {
                out[(ci, y, t)] = dseq[(t, ci * h + y)];
            }
        }
    }
    out
}

fn reverse_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.slice(s![..;-1, ..]).to_owned()
}

fn lstm_dir_forward<F: Real>(
    x: &Array2<F>,
    dir: &LstmDir<F>,
    reversed: bool,
) -> (Array2<F>, LstmDirCache<F>) {
    let x_proc = if reversed { reverse_rows(x) } else { x.clone() };
    let t_len = x_proc.nrows();
    let units = dir.w_hh.ncols();

    // Input contributions for all time steps in one matmul.
    let mut xw = x_proc.dot(&dir.w_ih.t());
    for mut row in xw.axis_iter_mut(Axis(0)) {
        row.zip_mut_with(&dir.bias.view(), |v, &b| *v = *v + b);
    }

    let mut gi = Array2::<F>::zeros((t_len, units));
    let mut gf = Array2::<F>::zeros((t_len, units));
    let mut gg = Array2::<F>::zeros((t_len, units));
    let mut go = Array2::<F>::zeros((t_len, units));
    let mut cs = Array2::<F>::zeros((t_len, units));
    let mut tanh_cs = Array2::<F>::zeros((t_len, units));
    let mut hs = Array2::<F>::zeros((t_len, units));

    let mut h_prev = Array1::<F>::zeros(units);
    let mut c_prev = Array1::<F>::zeros(units);
    for t in 0..t_len {
        let z = &xw.row(t) + &dir.w_hh.dot(&h_prev);
        for u in 0..units {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[units + u]);
            let g = z[2 * units + u].tanh();
            let o = sigmoid(z[3 * units + u]);
            let c = f * c_prev[u] + i * g;
            let tc = c.tanh();
            let h = o * tc;
            gi[(t, u)] = i;
            gf[(t, u)] = f;
            gg[(t, u)] = g;
            go[(t, u)] = o;
            cs[(t, u)] = c;
            tanh_cs[(t, u)] = tc;
            hs[(t, u)] = h;
        }
        h_prev.assign(&hs.row(t));
        c_prev.assign(&cs.row(t));
    }

    let out = if reversed { reverse_rows(&hs) } else { hs.clone() };
    (
        out,
        LstmDirCache {
            x: x_proc,
            i: gi,
            f: gf,
            g: gg,
            o: go,
            c: cs,
            tanh_c: tanh_cs,
            h: hs,
            reversed,
        },
    )
}

/// Returns (dw_ih, dw_hh, dbias, dx) for one direction, with `dh_out` and
/// `dx` in input time order.
fn lstm_dir_backward<F: Real>(
    dh_out: &Array2<F>,
    dir: &LstmDir<F>,
    cache: &LstmDirCache<F>,
) -> (Array2<F>, Array2<F>, Array1<F>, Array2<F>) {
    let t_len = cache.x.nrows();
    let units = dir.w_hh.ncols();
    let dh_proc = if cache.reversed { reverse_rows(dh_out) } else { dh_out.clone() };

    let mut dz_all = Array2::<F>::zeros((t_len, 4 * units));
    let mut dh_next = Array1::<F>::zeros(units);
    let mut dc_next = Array1::<F>::zeros(units);
    let one = F::one();
    for t in (0..t_len).rev() {
        let mut dz = Array1::<F>::zeros(4 * units);
        for u in 0..units {
            let dh = dh_proc[(t, u)] + dh_next[u];
            let o = cache.o[(t, u)];
            let tc = cache.tanh_c[(t, u)];
            let do_ = dh * tc;
            let dc = dh * o * (one - tc * tc) + dc_next[u];
            let i = cache.i[(t, u)];
            let f = cache.f[(t, u)];
            let g = cache.g[(t, u)];
            let c_prev = if t == 0 { F::zero() } else { cache.c[(t - 1, u)] };
            let di = dc * g;
            let dg = dc * i;
            let df = dc * c_prev;
            dc_next[u] = dc * f;
            dz[u] = di * i * (one - i);
            dz[units + u] = df * f * (one - f);
            dz[2 * units + u] = dg * (one - g * g);
            dz[3 * units + u] = do_ * o * (one - o);
        }
        dh_next = dir.w_hh.t().dot(&dz);
        dz_all.row_mut(t).assign(&dz);
    }

    let dw_ih = dz_all.t().dot(&cache.x);
    let dbias = dz_all.sum_axis(Axis(0));
    let dw_hh = if t_len > 1 {
        dz_all.slice(s![1.., ..]).t().dot(&cache.h.slice(s![..t_len - 1, ..]))
    } else {
        Array2::zeros((4 * units, units))
    };
    let mut dx = dz_all.dot(&dir.w_ih);
    if cache.reversed {
        dx = reverse_rows(&dx);
    }
    (dw_ih, dw_hh, dbias, dx)
}

fn dropout_mask_seq<F: Real>(dims: (usize, usize), rate: f64, rng: &mut Stream) -> Array2<F> {
    let keep = 1.0 - rate;
    let scale = F::from_f64(1.0 / keep);
    Array2::from_shape_simple_fn(dims, || {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            F::zero()
        }
    })
}

fn dropout_mask_spatial<F: Real>(
    dims: (usize, usize, usize),
    rate: f64,
    rng: &mut Stream,
) -> Array3<F> {
    let keep = 1.0 - rate;
    let scale = F::from_f64(1.0 / keep);
    Array3::from_shape_simple_fn(dims, || {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            F::zero()
        }
    })
}

/// Run the network over a preprocessed line image, returning logits and the
/// caches needed by [`backward`]. `train_mode` activates (inverted)
/// dropout; a network whose spec ends in a dropout token applies that rate
/// after every LSTM layer.
pub fn forward_full<F: Real>(
    net: &NetTensors<F>,
    pixels: &ndarray::Array2<f32>,
    train_mode: bool,
    rng: &mut Stream,
) -> Result<(LogitMatrix<F>, ForwardCache<F>), ModelError> {
    let (h, w) = pixels.dim();
    let mut input = Array3::<F>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            input[(0, y, x)] = F::from_f64(pixels[(y, x)] as f64);
        }
    }

    let has_lstm = net.layers.iter().any(|l| matches!(l, LayerParams::Lstm { .. }));
    let trailing_dropout = match net.layers.last() {
        Some(LayerParams::Dropout { rate }) => *rate,
        _ => 0.0,
    };
    let last_index = net.layers.len().saturating_sub(1);

    let mut steps: Vec<(usize, StepCache<F>)> = Vec::new();
    let mut feat = Feat::Spatial(input);
    for (index, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerParams::Conv { w, b } => {
                let Feat::Spatial(x) = &feat else {
                    return Err(ModelError::SpatialAfterLstm { index });
                };
                let (out, cache) = conv_forward(x, w, b);
                steps.push((index, cache));
                feat = Feat::Spatial(out);
            }
            LayerParams::Pool { ph, pw } => {
                let Feat::Spatial(x) = &feat else {
                    return Err(ModelError::SpatialAfterLstm { index });
                };
                let (out, cache) = pool_forward(x, *ph, *pw)?;
                steps.push((index, cache));
                feat = Feat::Spatial(out);
            }
            LayerParams::Lstm { fwd, bwd, units } => {
                if let Feat::Spatial(x) = &feat {
                    let (c, hh, ww) = x.dim();
                    let seq = flatten_forward(x);
                    steps.push((index, StepCache::Flatten { channels: c, height: hh, width: ww }));
                    feat = Feat::Seq(seq);
                }
                let Feat::Seq(x) = &feat else { unreachable!() };
                let (h_fwd, cache_fwd) = lstm_dir_forward(x, fwd, false);
                let (h_bwd, cache_bwd) = lstm_dir_forward(x, bwd, true);
                let t_len = x.nrows();
                let mut out = Array2::<F>::zeros((t_len, 2 * units));
                out.slice_mut(s![.., ..*units]).assign(&h_fwd);
                out.slice_mut(s![.., *units..]).assign(&h_bwd);
                steps.push((index, StepCache::Lstm { fwd: cache_fwd, bwd: cache_bwd }));
                let mut seq = out;
                if train_mode && trailing_dropout > 0.0 {
                    let mask = dropout_mask_seq::<F>(seq.dim(), trailing_dropout, rng);
                    seq.zip_mut_with(&mask, |v, &m| *v = *v * m);
                    steps.push((index, StepCache::DropoutSeq { mask }));
                }
                feat = Feat::Seq(seq);
            }
            LayerParams::Dropout { rate } => {
                // A trailing dropout token was already applied after each
                // LSTM layer above.
                if index == last_index && has_lstm {
                    continue;
                }
                if !train_mode || *rate <= 0.0 {
                    continue;
                }
                match &mut feat {
                    Feat::Seq(x) => {
                        let mask = dropout_mask_seq::<F>(x.dim(), *rate, rng);
                        x.zip_mut_with(&mask, |v, &m| *v = *v * m);
                        steps.push((index, StepCache::DropoutSeq { mask }));
                    }
                    Feat::Spatial(x) => {
                        let mask = dropout_mask_spatial::<F>(x.dim(), *rate, rng);
                        x.zip_mut_with(&mask, |v, &m| *v = *v * m);
                        steps.push((index, StepCache::DropoutSpatial { mask }));
                    }
                }
            }
        }
    }

    let proj_input = match feat {
        Feat::Seq(x) => x,
        Feat::Spatial(x) => {
            let (c, hh, ww) = x.dim();
            let seq = flatten_forward(&x);
            steps.push((net.layers.len(), StepCache::Flatten { channels: c, height: hh, width: ww }));
            seq
        }
    };

    let mut logits = proj_input.dot(&net.proj.w);
    for mut row in logits.axis_iter_mut(Axis(0)) {
        row.zip_mut_with(&net.proj.b.view(), |v, &b| *v = *v + b);
    }
    debug_assert!(logits.iter().all(|v| v.is_finite()));

    Ok((logits, ForwardCache { steps, proj_input }))
}

/// Network forward pass on a line image. Training mode runs the raw
/// tensors with dropout; evaluation mode runs the EMA tensors and is
/// deterministic.
pub fn forward<F: Real>(
    model: &ModelParams<F>,
    img: &LineImage,
    train_mode: bool,
    rng: &mut Stream,
) -> Result<LogitMatrix<F>, ModelError> {
    if img.height() != model.input_height {
        return Err(ModelError::HeightMismatch {
            expected: model.input_height,
            got: img.height(),
        });
    }
    let net = if train_mode { &model.tensors } else { &model.ema };
    forward_full(net, &img.pixels, train_mode, rng).map(|(logits, _)| logits)
}

/// Exact gradients of a scalar loss with respect to every tensor, given
/// the loss gradient at the logits.
pub fn backward<F: Real>(
    net: &NetTensors<F>,
    cache: &ForwardCache<F>,
    dlogits: &Array2<F>,
) -> NetTensors<F> {
    let mut grads = net.zeros_like();

    grads.proj.w = cache.proj_input.t().dot(dlogits);
    grads.proj.b = dlogits.sum_axis(Axis(0));
    let mut dfeat = Feat::Seq(dlogits.dot(&net.proj.w.t()));

    for (index, step) in cache.steps.iter().rev() {
        match step {
            StepCache::Flatten { channels, height, width } => {
                let Feat::Seq(d) = &dfeat else { unreachable!() };
                dfeat = Feat::Spatial(flatten_backward(d, *channels, *height, *width));
            }
            StepCache::DropoutSeq { mask } => {
                let Feat::Seq(d) = &mut dfeat else { unreachable!() };
                d.zip_mut_with(mask, |v, &m| *v = *v * m);
            }
            StepCache::DropoutSpatial { mask } => {
                let Feat::Spatial(d) = &mut dfeat else { unreachable!() };
                d.zip_mut_with(mask, |v, &m| *v = *v * m);
            }
            StepCache::Lstm { fwd, bwd } => {
                let Feat::Seq(d) = &dfeat else { unreachable!() };
                let (LayerParams::Lstm { fwd: fwd_p, bwd: bwd_p, units },) =
                    (&net.layers[*index],)
                else {
                    unreachable!("lstm layer")
                };
                let d_fwd = d.slice(s![.., ..*units]).to_owned();
                let d_bwd = d.slice(s![.., *units..]).to_owned();
                let (dw_ih_f, dw_hh_f, db_f, dx_f) = lstm_dir_backward(&d_fwd, fwd_p, fwd);
                let (dw_ih_b, dw_hh_b, db_b, dx_b) = lstm_dir_backward(&d_bwd, bwd_p, bwd);
                let LayerParams::Lstm { fwd: gf, bwd: gb, .. } = &mut grads.layers[*index]
                else {
                    unreachable!()
                };
                gf.w_ih = gf.w_ih.clone() + dw_ih_f;
                gf.w_hh = gf.w_hh.clone() + dw_hh_f;
                gf.bias = gf.bias.clone() + db_f;
                gb.w_ih = gb.w_ih.clone() + dw_ih_b;
                gb.w_hh = gb.w_hh.clone() + dw_hh_b;
                gb.bias = gb.bias.clone() + db_b;
                dfeat = Feat::Seq(dx_f + dx_b);
            }
            StepCache::Conv { .. } => {
                let Feat::Spatial(d) = &dfeat else { unreachable!() };
                let LayerParams::Conv { w, .. } = &net.layers[*index] else {
                    unreachable!("conv layer")
                };
                let (dw, db, dx) = conv_backward(d, w, step);
                let LayerParams::Conv { w: gw, b: gb } = &mut grads.layers[*index] else {
                    unreachable!()
                };
                *gw = gw.clone() + dw;
                *gb = gb.clone() + db;
                dfeat = Feat::Spatial(dx);
            }
            StepCache::Pool { .. } => {
                let Feat::Spatial(d) = &dfeat else { unreachable!() };
                dfeat = Feat::Spatial(pool_backward(d, step));
            }
        }
    }
    grads
}

/// Sequence length produced for an image of the given width.
pub(super) fn sequence_length(width: usize, pool_width_product: usize) -> usize {
    width / pool_width_product
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_spec;
    use crate::recognizer::model::{build_tensors, instantiate, Codec};

    fn test_image(h: usize, w: usize) -> ndarray::Array2<f32> {
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            (((y * 31 + x * 17) % 23) as f32) / 22.0
        })
    }

    /// Scalar probe loss: sum(logits * weights) with fixed pseudo-random
    /// weights, so its gradient at the logits is just the weights.
    fn probe_loss(logits: &Array2<f64>) -> (f64, Array2<f64>) {
        let (t, k) = logits.dim();
        let weights = Array2::from_shape_fn((t, k), |(i, j)| {
            (((i * 7 + j * 13) % 11) as f64 - 5.0) / 7.0
        });
        let loss = (logits * &weights).sum();
        (loss, weights)
    }

    fn net_loss(
        net: &NetTensors<f64>,
        pixels: &ndarray::Array2<f32>,
    ) -> f64 {
        let mut rng = crate::rng::keyed_stream(0, "unused");
        let (logits, _) = forward_full(net, pixels, false, &mut rng).unwrap();
        probe_loss(&logits).0
    }

    fn gradcheck_net(spec_text: &str, input_h: usize, codec_size: usize, width: usize) {
        let spec = parse_spec(spec_text).unwrap();
        let codec = Codec::new(('a'..).take(codec_size).collect()).unwrap();
        let mut rng = crate::rng::keyed_stream(17, "gradcheck-init");
        let model = instantiate::<f64>(&spec, input_h, codec, &mut rng).unwrap();
        let mut net = model.tensors;
        let pixels = test_image(input_h, width);

        let mut fwd_rng = crate::rng::keyed_stream(0, "unused");
        let (logits, cache) = forward_full(&net, &pixels, false, &mut fwd_rng).unwrap();
        let (_, dlogits) = probe_loss(&logits);
        let grads = backward(&net, &cache, &dlogits);

        let h = 1e-6;
        let grad_tensors: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(name, t)| (name, t.iter().cloned().collect()))
            .collect();
        for (tensor_idx, (name, analytic)) in grad_tensors.iter().enumerate() {
            for elem in 0..analytic.len() {
                let orig = {
                    let views = net.tensors();
                    *views[tensor_idx].1.iter().nth(elem).unwrap()
                };
                set_elem(&mut net, tensor_idx, elem, orig + h);
                let up = net_loss(&net, &pixels);
                set_elem(&mut net, tensor_idx, elem, orig - h);
                let down = net_loss(&net, &pixels);
                set_elem(&mut net, tensor_idx, elem, orig);
                let fd = (up - down) / (2.0 * h);
                let ga = analytic[elem];
                let denom = ga.abs().max(fd.abs()).max(1e-4);
                let rel = (ga - fd).abs() / denom;
                assert!(
                    rel < 1e-5,
                    "{name}[{elem}]: analytic {ga:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                );
            }
        }
    }

    fn set_elem(net: &mut NetTensors<f64>, tensor_idx: usize, elem: usize, value: f64) {
        let mut views = net.tensors_mut();
        *views[tensor_idx].1.iter_mut().nth(elem).unwrap() = value;
    }

    #[test]
    fn gradcheck_conv_pool_projection() {
        gradcheck_net("conv=2:3x3,pool=2x2", 4, 2, 6);
    }

    #[test]
    fn gradcheck_lstm_only() {
        gradcheck_net("lstm=3", 2, 2, 4);
    }

    #[test]
    fn gradcheck_small_stack() {
        gradcheck_net("conv=2:2x3,pool=2x2,lstm=3,dropout=0.0", 4, 2, 7);
    }

    #[test]
    fn zero_tensors_give_uniform_logits() {
        let spec = parse_spec("conv=2:3x3,pool=2x2,lstm=4,dropout=0.0").unwrap();
        let net = build_tensors::<f64>(&spec, 8, 3, None).unwrap();
        let pixels = test_image(8, 12);
        let mut rng = crate::rng::keyed_stream(0, "unused");
        let (logits, _) = forward_full(&net, &pixels, false, &mut rng).unwrap();
        assert_eq!(logits.dim(), (6, 4));
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_length_is_width_over_pool_product() {
        let spec = parse_spec("conv=4:3x3,pool=2x2,conv=4:3x3,pool=2x2,lstm=4,dropout=0.5")
            .unwrap();
        let codec = Codec::new(vec!['a', 'b']).unwrap();
        let mut rng = crate::rng::keyed_stream(3, "tlen");
        let model = instantiate::<f32>(&spec, 8, codec, &mut rng).unwrap();
        let img = LineImage::new(test_image(8, 100), Default::default());
        let logits = forward(&model, &img, false, &mut rng).unwrap();
        assert_eq!(logits.nrows(), 25);
        assert_eq!(sequence_length(100, model.spec.pool_width_product()), 25);
    }

    #[test]
    fn eval_mode_deterministic_and_uses_ema() {
        let spec = parse_spec("conv=2:3x3,pool=2x2,lstm=4,dropout=0.5").unwrap();
        let codec = Codec::new(vec!['a', 'b']).unwrap();
        let mut rng = crate::rng::keyed_stream(5, "det");
        let mut model = instantiate::<f32>(&spec, 8, codec, &mut rng).unwrap();
        let img = LineImage::new(test_image(8, 20), Default::default());
        let a = forward(&model, &img, false, &mut crate::rng::keyed_stream(1, "x")).unwrap();
        let b = forward(&model, &img, false, &mut crate::rng::keyed_stream(2, "y")).unwrap();
        assert_eq!(a, b);
        // Eval reads the EMA shadow: zero it out and the output changes.
        for (_, mut t) in model.ema.tensors_mut() {
            t.fill(0.0);
        }
        let c = forward(&model, &img, false, &mut crate::rng::keyed_stream(1, "x")).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert_ne!(a, c);
    }

    #[test]
    fn height_mismatch_rejected() {
        let spec = parse_spec("lstm=2").unwrap();
        let codec = Codec::new(vec!['a']).unwrap();
        let mut rng = crate::rng::keyed_stream(6, "hm");
        let model = instantiate::<f32>(&spec, 8, codec, &mut rng).unwrap();
        let img = LineImage::new(test_image(10, 20), Default::default());
        assert!(matches!(
            forward(&model, &img, false, &mut rng),
            Err(ModelError::HeightMismatch { expected: 8, got: 10 })
        ));
    }

    #[test]
    fn too_narrow_image_rejected() {
        let spec = parse_spec("pool=2x8").unwrap();
        let codec = Codec::new(vec!['a']).unwrap();
        let mut rng = crate::rng::keyed_stream(7, "narrow");
        let model = instantiate::<f32>(&spec, 8, codec, &mut rng).unwrap();
        let img = LineImage::new(test_image(8, 5), Default::default());
        assert!(matches!(
            forward(&model, &img, false, &mut rng),
            Err(ModelError::TooNarrow { width: 5 })
        ));
    }

    #[test]
    fn dropout_zero_rate_matches_eval() {
        let spec = parse_spec("conv=2:3x3,pool=2x2,lstm=4,dropout=0.0").unwrap();
        let codec = Codec::new(vec!['a', 'b']).unwrap();
        let mut rng = crate::rng::keyed_stream(8, "d0");
        let model = instantiate::<f32>(&spec, 8, codec, &mut rng).unwrap();
        let img = LineImage::new(test_image(8, 16), Default::default());
        let train = forward(&model, &img, true, &mut crate::rng::keyed_stream(1, "a")).unwrap();
        let eval = forward(&model, &img, false, &mut crate::rng::keyed_stream(2, "b")).unwrap();
        // Fresh model: EMA equals raw, so both modes agree at rate 0.
        assert_eq!(train, eval);
    }

    #[test]
    fn trailing_dropout_fires_after_each_lstm() {
        let spec = parse_spec("lstm=4,lstm=4,dropout=0.9").unwrap();
        let codec = Codec::new(vec!['a']).unwrap();
        let mut rng = crate::rng::keyed_stream(9, "dd");
        let model = instantiate::<f32>(&spec, 8, codec, &mut rng).unwrap();
        let pixels = test_image(8, 6);
        let mut fwd_rng = crate::rng::keyed_stream(10, "mask");
        let (_, cache) = forward_full(&model.tensors, &pixels, true, &mut fwd_rng).unwrap();
        let dropout_steps = cache
            .steps
            .iter()
            .filter(|(_, s)| matches!(s, StepCache::DropoutSeq { .. }))
            .count();
        assert_eq!(dropout_steps, 2);
    }
}
