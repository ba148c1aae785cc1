//! Line image preprocessing: binarization variants, height normalization,
//! and randomized degradation for training augmentation.
//!
//! Images are h x w matrices of `f32` in [0, 1] where 0 is ink and 1 is
//! background.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f32::consts::PI;
use thiserror::Error;

use crate::rng::Stream;

/// Identifies where a line image came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SourceId {
    pub manuscript: String,
    pub page: String,
    pub line: String,
}

impl SourceId {
    pub fn new(
        manuscript: impl Into<String>,
        page: impl Into<String>,
        line: impl Into<String>,
    ) -> Self {
        SourceId { manuscript: manuscript.into(), page: page.into(), line: line.into() }
    }
}

impl std::fmt::Display for SourceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.manuscript, self.page, self.line)
    }
}

/// A cropped text line. Pixel values are in [0, 1], 0 = ink.
#[derive(Debug, Clone, PartialEq)]
pub struct LineImage {
    pub pixels: Array2<f32>,
    pub source_id: SourceId,
}

impl LineImage {
    pub fn new(pixels: Array2<f32>, source_id: SourceId) -> Self {
        debug_assert!(pixels.nrows() >= 1 && pixels.ncols() >= 1);
        debug_assert!(pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        LineImage { pixels, source_id }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

#[derive(Debug, Error)]
pub enum LineProcError {
    #[error("window {window} exceeds both image dimensions {h}x{w}")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("window must be odd and >= 3, got {0}")]
    BadWindow(usize),
}

/// Binarization / normalization method for line images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinarizeMethod {
    /// Global threshold maximizing between-class variance.
    Otsu,
    /// Local threshold `m * (1 + k * (s / R - 1))` with `R = 0.5`.
    Sauvola { window: usize, k: f32 },
    /// Local threshold `m - k * (1 - s / s_max) * (m - min)`.
    Wolf { window: usize, k: f32 },
    /// Percentile contrast stretch (5th -> 0, 95th -> 1), stays grayscale.
    GrayNorm,
}

impl BinarizeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BinarizeMethod::Otsu => "otsu",
            BinarizeMethod::Sauvola { .. } => "sauvola",
            BinarizeMethod::Wolf { .. } => "wolf",
            BinarizeMethod::GrayNorm => "graynorm",
        }
    }
}

const HIST_BINS: usize = 256;

fn histogram(pixels: &Array2<f32>) -> [usize; HIST_BINS] {
    let mut hist = [0usize; HIST_BINS];
    for &v in pixels.iter() {
        let bin = ((v * (HIST_BINS - 1) as f32).round() as usize).min(HIST_BINS - 1);
        hist[bin] += 1;
    }
    hist
}

/// Otsu threshold bin, or `None` for a single-level image. Bins below the
/// returned bin are the ink class.
fn otsu_threshold(hist: &[usize; HIST_BINS]) -> Option<usize> {
    let total: usize = hist.iter().sum();
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut best: Option<(f64, usize)> = None;
    let mut w0 = 0f64;
    let mut sum0 = 0f64;
    for t in 1..HIST_BINS {
        w0 += hist[t - 1] as f64;
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_sum - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.map_or(true, |(b, _)| between > b) {
            best = Some((between, t));
        }
    }
    best.map(|(_, t)| t)
}

/// Box-window mean and standard deviation per pixel, window clipped at the
/// image border. Computed with f64 integral images.
fn local_mean_std(pixels: &Array2<f32>, window: usize) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = pixels.dim();
    let r = window / 2;
    // Integral images with a zero row/column at the top/left.
    let mut sum = Array2::<f64>::zeros((h + 1, w + 1));
    let mut sq = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row_sum = 0f64;
        let mut row_sq = 0f64;
        for x in 0..w {
            let v = pixels[(y, x)] as f64;
            row_sum += v;
            row_sq += v * v;
            sum[(y + 1, x + 1)] = sum[(y, x + 1)] + row_sum;
            sq[(y + 1, x + 1)] = sq[(y, x + 1)] + row_sq;
        }
    }
    let mut mean = Array2::<f64>::zeros((h, w));
    let mut std = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let s = sum[(y1, x1)] - sum[(y0, x1)] - sum[(y1, x0)] + sum[(y0, x0)];
            let s2 = sq[(y1, x1)] - sq[(y0, x1)] - sq[(y1, x0)] + sq[(y0, x0)];
            let m = s / n;
            mean[(y, x)] = m;
            std[(y, x)] = (s2 / n - m * m).max(0.0).sqrt();
        }
    }
    (mean, std)
}

fn check_window(window: usize, h: usize, w: usize) -> Result<(), LineProcError> {
    if window < 3 || window % 2 == 0 {
        return Err(LineProcError::BadWindow(window));
    }
    if window > h && window > w {
        return Err(LineProcError::WindowTooLarge { window, h, w });
    }
    Ok(())
}

/// Binarize or contrast-normalize a line image. The binary methods emit
/// exactly {0, 1}; `GrayNorm` emits grayscale in [0, 1].
pub fn binarize(img: &LineImage, method: BinarizeMethod) -> Result<LineImage, LineProcError> {
    let (h, w) = img.pixels.dim();
    let pixels = match method {
        BinarizeMethod::Otsu => {
            let hist = histogram(&img.pixels);
            match otsu_threshold(&hist) {
                // Single-level image: no ink to separate, everything is
                // background.
                None => Array2::from_elem((h, w), 1.0),
                Some(t) => img.pixels.mapv(|v| {
                    let bin = ((v * (HIST_BINS - 1) as f32).round() as usize).min(HIST_BINS - 1);
                    if bin < t { 0.0 } else { 1.0 }
                }),
            }
        }
        BinarizeMethod::Sauvola { window, k } => {
            check_window(window, h, w)?;
            let (mean, std) = local_mean_std(&img.pixels, window);
            let r = 0.5f64;
            let mut out = Array2::<f32>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let t = mean[(y, x)] * (1.0 + k as f64 * (std[(y, x)] / r - 1.0));
                    out[(y, x)] = if (img.pixels[(y, x)] as f64) < t { 0.0 } else { 1.0 };
                }
            }
            out
        }
        BinarizeMethod::Wolf { window, k } => {
            check_window(window, h, w)?;
            let (mean, std) = local_mean_std(&img.pixels, window);
            let min_val = img.pixels.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let s_max = std.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
            let mut out = Array2::<f32>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let m = mean[(y, x)];
                    let t = m - k as f64 * (1.0 - std[(y, x)] / s_max) * (m - min_val);
                    out[(y, x)] = if (img.pixels[(y, x)] as f64) < t { 0.0 } else { 1.0 };
                }
            }
            out
        }
        BinarizeMethod::GrayNorm => {
            let mut values: Vec<f32> = img.pixels.iter().cloned().collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pct = |p: f64| {
                let pos = p * (values.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = (pos - lo as f64) as f32;
                values[lo] * (1.0 - frac) + values[hi] * frac
            };
            let p5 = pct(0.05);
            let p95 = pct(0.95);
            if p95 - p5 < 1e-6 {
                Array2::from_elem((h, w), 1.0)
            } else {
                img.pixels.mapv(|v| ((v - p5) / (p95 - p5)).clamp(0.0, 1.0))
            }
        }
    };
    Ok(LineImage { pixels, source_id: img.source_id.clone() })
}

/// Bilinear sample with border clamping; coordinates are pixel centers.
fn sample_bilinear(pixels: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = pixels.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = pixels[(y0, x0)] * (1.0 - fx) + pixels[(y0, x1)] * fx;
    let bot = pixels[(y1, x0)] * (1.0 - fx) + pixels[(y1, x1)] * fx;
    top * (1.0 - fy) + bot * fy
}

fn resize_bilinear(pixels: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = pixels.dim();
    if out_h == h && out_w == w {
        return pixels.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let y = (oy as f32 + 0.5) * sy - 0.5;
        let x = (ox as f32 + 0.5) * sx - 0.5;
        sample_bilinear(pixels, y, x).clamp(0.0, 1.0)
    })
}

/// Rescale to a fixed height, keeping the aspect ratio. Width is rounded
/// to the nearest pixel and never drops below 1.
pub fn normalize_height(img: &LineImage, target_h: usize) -> LineImage {
    debug_assert!(target_h >= 8);
    let (h, w) = img.pixels.dim();
    if h == target_h {
        return img.clone();
    }
    let scale = target_h as f64 / h as f64;
    let out_w = ((w as f64 * scale).round() as usize).max(1);
    LineImage {
        pixels: resize_bilinear(&img.pixels, target_h, out_w),
        source_id: img.source_id.clone(),
    }
}

/// The magnitudes of one degradation draw. All zeros (and `h_scale` 1)
/// reproduce the input exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeParams {
    /// Gaussian pixel noise sigma, drawn from [0, 0.05].
    pub noise_sigma: f32,
    /// Gaussian blur sigma, drawn from [0, 1].
    pub blur_sigma: f32,
    /// Rotation in degrees, drawn from [-2, 2].
    pub rotate_deg: f32,
    /// Horizontal scale factor, drawn from [0.9, 1.1].
    pub h_scale: f32,
    /// Multiplicative brightness jitter, drawn from [-0.1, 0.1].
    pub intensity: f32,
    /// Seed for the per-pixel noise field.
    pub noise_seed: u64,
}

impl DegradeParams {
    pub fn identity() -> Self {
        DegradeParams {
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            rotate_deg: 0.0,
            h_scale: 1.0,
            intensity: 0.0,
            noise_seed: 0,
        }
    }

    /// Draw one parameter set. Always consumes the same amount of stream
    /// state regardless of the values drawn.
    pub fn sample(rng: &mut Stream) -> Self {
        DegradeParams {
            noise_sigma: rng.gen_range(0.0..=0.05),
            blur_sigma: rng.gen_range(0.0..=1.0),
            rotate_deg: rng.gen_range(-2.0..=2.0),
            h_scale: rng.gen_range(0.9..=1.1),
            intensity: rng.gen_range(-0.1..=0.1),
            noise_seed: rng.gen(),
        }
    }
}

fn gaussian_blur(pixels: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return pixels.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f32 / sigma).powi(2)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = pixels.dim();
    let clamp_get = |arr: &Array2<f32>, y: i64, x: i64| {
        arr[(y.clamp(0, h as i64 - 1) as usize, x.clamp(0, w as i64 - 1) as usize)]
    };
    // Separable: horizontal then vertical pass.
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * clamp_get(pixels, y as i64, x as i64 + i as i64 - radius);
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * clamp_get(&tmp, y as i64 + i as i64 - radius, x as i64);
            }
            out[(y, x)] = acc;
        }
    }
    out
}

fn rotate(pixels: &Array2<f32>, degrees: f32) -> Array2<f32> {
    if degrees == 0.0 {
        return pixels.clone();
    }
    let (h, w) = pixels.dim();
    let theta = degrees * PI / 180.0;
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(oy, ox)| {
        let dy = oy as f32 - cy;
        let dx = ox as f32 - cx;
        let sy = cy + dy * cos - dx * sin;
        let sx = cx + dy * sin + dx * cos;
        if sy < -0.5 || sx < -0.5 || sy > h as f32 - 0.5 || sx > w as f32 - 0.5 {
            1.0 // background outside the source
        } else {
            sample_bilinear(pixels, sy, sx)
        }
    })
}

/// Apply a fixed degradation. `degrade_with(img, DegradeParams::identity())`
/// returns the input unchanged.
pub fn degrade_with(img: &LineImage, params: &DegradeParams) -> LineImage {
    let mut pixels = rotate(&img.pixels, params.rotate_deg);
    if params.h_scale != 1.0 {
        let (h, w) = pixels.dim();
        let out_w = ((w as f32 * params.h_scale).round() as usize).max(1);
        pixels = resize_bilinear(&pixels, h, out_w);
    }
    pixels = gaussian_blur(&pixels, params.blur_sigma);
    if params.intensity != 0.0 {
        pixels.mapv_inplace(|v| v * (1.0 + params.intensity));
    }
    if params.noise_sigma > 0.0 {
        let mut noise_rng = crate::rng::keyed_stream(params.noise_seed, "degrade-noise");
        let normal = Normal::new(0.0f32, params.noise_sigma).unwrap();
        pixels.mapv_inplace(|v| v + normal.sample(&mut noise_rng));
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    LineImage { pixels, source_id: img.source_id.clone() }
}

/// Randomized degradation: noise, blur, small rotation, horizontal scale
/// jitter, and intensity jitter, composed in a fixed order. Deterministic
/// given the stream state.
pub fn degrade(img: &LineImage, rng: &mut Stream) -> LineImage {
    let params = DegradeParams::sample(rng);
    degrade_with(img, &params)
}
