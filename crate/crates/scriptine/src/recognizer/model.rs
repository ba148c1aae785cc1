//! Model parameters: codec, per-layer tensors, EMA shadow, and
//! initialization from a network spec.

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use std::collections::BTreeSet;
use thiserror::Error;

use super::Real;
use crate::netspec::{Layer, NetworkSpec};
use crate::rng::Stream;

/// Ordered character table. Output index 0 is the CTC blank and is not part
/// of the table; character `i` maps to output index `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codec {
    chars: Vec<char>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("codec characters must be unique, {0:?} repeats")]
    DuplicateChar(char),
    #[error("character {0:?} is not in the codec")]
    Unencodable(char),
    #[error("input height {height} is not divisible by the pool height product {product}")]
    PoolDivisibility { height: usize, product: usize },
    #[error("conv/pool layers cannot follow an lstm layer (layer {index})")]
    SpatialAfterLstm { index: usize },
    #[error("image height {got} does not match the model input height {expected}")]
    HeightMismatch { expected: usize, got: usize },
    #[error("image of width {width} pools down to an empty sequence")]
    TooNarrow { width: usize },
    #[error("model container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Codec {
    pub fn new(chars: Vec<char>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for &c in &chars {
            if !seen.insert(c) {
                return Err(ModelError::DuplicateChar(c));
            }
        }
        Ok(Codec { chars })
    }

    /// Sorted unique characters of the given texts.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        Codec { chars: set.into_iter().collect() }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of characters, excluding the blank.
    pub fn size(&self) -> usize {
        self.chars.len()
    }

    /// Network output dimension: characters plus the blank.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        if index == 0 {
            None // blank
        } else {
            self.chars.get(index - 1).copied()
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(ModelError::Unencodable(c)))
            .collect()
    }

    pub fn can_encode(&self, text: &str) -> bool {
        text.chars().all(|c| self.index_of(c).is_some())
    }

    /// New codec with the characters of `texts` that are missing here
    /// appended in sorted order. Existing indices are preserved; nothing is
    /// ever removed.
    pub fn extended<'a, I: IntoIterator<Item = &'a str>>(&self, texts: I) -> Codec {
        let mut new_chars: BTreeSet<char> =
            texts.into_iter().flat_map(|t| t.chars()).collect();
        for c in &self.chars {
            new_chars.remove(c);
        }
        let mut chars = self.chars.clone();
        chars.extend(new_chars);
        Codec { chars }
    }
}

/// One LSTM direction: input, recurrent, and bias tensors with gates packed
/// in i, f, g, o order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDir<F> {
    /// `[4 * units, input_dim]`
    pub w_ih: Array2<F>,
    /// `[4 * units, units]`
    pub w_hh: Array2<F>,
    /// `[4 * units]`
    pub bias: Array1<F>,
}

/// Parameters of one layer, mirroring the spec's layer list.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<F> {
    /// `w: [filters, in_channels, kh, kw]`
    Conv { w: Array4<F>, b: Array1<F> },
    Pool { ph: usize, pw: usize },
    Lstm { fwd: LstmDir<F>, bwd: LstmDir<F>, units: usize },
    Dropout { rate: f64 },
}

/// Output projection onto `codec size + 1` classes: `w: [input_dim, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// All trainable tensors of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetTensors<F> {
    pub layers: Vec<LayerParams<F>>,
    pub proj: Projection<F>,
}

impl<F: Real> NetTensors<F> {
    /// Named views over every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Conv { w, b } => {
                    out.push((format!("layer{i}.conv.w"), w.view().into_dyn()));
                    out.push((format!("layer{i}.conv.b"), b.view().into_dyn()));
                }
                LayerParams::Lstm { fwd, bwd, .. } => {
                    for (dir, name) in [(fwd, "fwd"), (bwd, "bwd")] {
                        out.push((format!("layer{i}.lstm.{name}.w_ih"), dir.w_ih.view().into_dyn()));
                        out.push((format!("layer{i}.lstm.{name}.w_hh"), dir.w_hh.view().into_dyn()));
                        out.push((format!("layer{i}.lstm.{name}.bias"), dir.bias.view().into_dyn()));
                    }
                }
                LayerParams::Pool { .. } | LayerParams::Dropout { .. } => {}
            }
        }
        out.push(("proj.w".to_string(), self.proj.w.view().into_dyn()));
        out.push(("proj.b".to_string(), self.proj.b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::Conv { w, b } => {
                    out.push((format!("layer{i}.conv.w"), w.view_mut().into_dyn()));
                    out.push((format!("layer{i}.conv.b"), b.view_mut().into_dyn()));
                }
                LayerParams::Lstm { fwd, bwd, .. } => {
                    for (dir, name) in [(fwd, "fwd"), (bwd, "bwd")] {
                        out.push((
                            format!("layer{i}.lstm.{name}.w_ih"),
                            dir.w_ih.view_mut().into_dyn(),
                        ));
                        out.push((
                            format!("layer{i}.lstm.{name}.w_hh"),
                            dir.w_hh.view_mut().into_dyn(),
                        ));
                        out.push((
                            format!("layer{i}.lstm.{name}.bias"),
                            dir.bias.view_mut().into_dyn(),
                        ));
                    }
                }
                LayerParams::Pool { .. } | LayerParams::Dropout { .. } => {}
            }
        }
        out.push(("proj.w".to_string(), self.proj.w.view_mut().into_dyn()));
        out.push(("proj.b".to_string(), self.proj.b.view_mut().into_dyn()));
        out
    }

    /// Same structure, all values zero. Used for gradients and optimizer
    /// moments.
    pub fn zeros_like(&self) -> NetTensors<F> {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(F::zero());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &NetTensors<F>) {
        let theirs = other.tensors();
        for ((_, mut mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.zip_mut_with(&t, |a, &b| *a = *a + b);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

/// Training bookkeeping carried with the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainMeta {
    pub samples_seen: u64,
    pub epochs: u32,
}

/// A complete model: architecture, codec, raw tensors, and their EMA
/// shadow. Training writes `tensors`; evaluation reads `ema`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub spec: NetworkSpec,
    pub codec: Codec,
    pub input_height: usize,
    pub tensors: NetTensors<F>,
    pub ema: NetTensors<F>,
    pub meta: TrainMeta,
}

fn glorot<F: Real>(rng: &mut Stream, fan_in: usize, fan_out: usize) -> impl FnMut() -> F + '_ {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    move || F::from_f64(rng.gen_range(-limit..=limit))
}

/// Walk the spec and report the flattened feature dimension feeding the
/// projection, plus the (channels, height) trace for validation.
fn plan_dims(
    spec: &NetworkSpec,
    input_height: usize,
) -> Result<Vec<(usize, usize)>, ModelError> {
    let product = spec.pool_height_product();
    if input_height % product != 0 {
        return Err(ModelError::PoolDivisibility { height: input_height, product });
    }
    // (channels, height); height 0 marks sequence mode where channels is
    // the per-frame feature dimension.
    let mut dims = Vec::with_capacity(spec.layers.len() + 1);
    let mut channels = 1usize;
    let mut height = input_height;
    let mut seq = false;
    dims.push((channels, height));
    for (index, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Conv { filters, .. } => {
                if seq {
                    return Err(ModelError::SpatialAfterLstm { index });
                }
                channels = filters;
            }
            Layer::Pool { ph, .. } => {
                if seq {
                    return Err(ModelError::SpatialAfterLstm { index });
                }
                height /= ph;
            }
            Layer::Lstm { units } => {
                if !seq {
                    height = 0;
                    seq = true;
                }
                channels = 2 * units;
            }
            Layer::Dropout { .. } => {}
        }
        dims.push((channels, height));
    }
    Ok(dims)
}

fn zero_lstm_dir<F: Real>(input_dim: usize, units: usize) -> LstmDir<F> {
    LstmDir {
        w_ih: Array2::zeros((4 * units, input_dim)),
        w_hh: Array2::zeros((4 * units, units)),
        bias: Array1::zeros(4 * units),
    }
}

fn init_lstm_dir<F: Real>(rng: &mut Stream, input_dim: usize, units: usize) -> LstmDir<F> {
    let w_ih = {
        let mut draw = glorot::<F>(rng, input_dim, units);
        Array2::from_shape_simple_fn((4 * units, input_dim), &mut draw)
    };
    let w_hh = {
        let mut draw = glorot::<F>(rng, units, units);
        Array2::from_shape_simple_fn((4 * units, units), &mut draw)
    };
    // Unit forget-gate bias (rows units..2*units) helps early training.
    let mut bias = Array1::zeros(4 * units);
    for i in units..2 * units {
        bias[i] = F::one();
    }
    LstmDir { w_ih, w_hh, bias }
}

/// Build the tensor structure for a spec, drawing weights from `init_rng`
/// (Glorot uniform) or zero-filled when `None`.
pub(super) fn build_tensors<F: Real>(
    spec: &NetworkSpec,
    input_height: usize,
    codec_size: usize,
    mut init_rng: Option<&mut Stream>,
) -> Result<NetTensors<F>, ModelError> {
    let dims = plan_dims(spec, input_height)?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (index, layer) in spec.layers.iter().enumerate() {
        let (in_channels, in_height) = dims[index];
        let feature_dim =
            if in_height == 0 { in_channels } else { in_channels * in_height };
        match *layer {
            Layer::Conv { filters, kh, kw } => {
                let fan_in = in_channels * kh * kw;
                let fan_out = filters * kh * kw;
                let w = match init_rng.as_deref_mut() {
                    Some(rng) => {
                        let mut draw = glorot::<F>(rng, fan_in, fan_out);
                        Array4::from_shape_simple_fn((filters, in_channels, kh, kw), &mut draw)
                    }
                    None => Array4::zeros((filters, in_channels, kh, kw)),
                };
                layers.push(LayerParams::Conv { w, b: Array1::zeros(filters) });
            }
            Layer::Pool { ph, pw } => layers.push(LayerParams::Pool { ph, pw }),
            Layer::Lstm { units } => {
                let (fwd, bwd) = match init_rng.as_deref_mut() {
                    Some(rng) => (
                        init_lstm_dir::<F>(rng, feature_dim, units),
                        init_lstm_dir::<F>(rng, feature_dim, units),
                    ),
                    None => (
                        zero_lstm_dir::<F>(feature_dim, units),
                        zero_lstm_dir::<F>(feature_dim, units),
                    ),
                };
                layers.push(LayerParams::Lstm { fwd, bwd, units });
            }
            Layer::Dropout { rate } => layers.push(LayerParams::Dropout { rate }),
        }
    }
    let proj_in = {
        let &(channels, height) = dims.last().unwrap();
        if height == 0 {
            channels
        } else {
            channels * height
        }
    };
    let classes = codec_size + 1;
    let w = match init_rng.as_deref_mut() {
        Some(rng) => {
            let mut draw = glorot::<F>(rng, proj_in, classes);
            Array2::from_shape_simple_fn((proj_in, classes), &mut draw)
        }
        None => Array2::zeros((proj_in, classes)),
    };
    Ok(NetTensors { layers, proj: Projection { w, b: Array1::zeros(classes) } })
}

/// Allocate and initialize a model for the given spec, input height, and
/// codec. Deterministic per rng stream; the EMA shadow starts equal to the
/// raw tensors.
pub fn instantiate<F: Real>(
    spec: &NetworkSpec,
    input_height: usize,
    codec: Codec,
    rng: &mut Stream,
) -> Result<ModelParams<F>, ModelError> {
    let tensors = build_tensors::<F>(spec, input_height, codec.size(), Some(rng))?;
    let ema = tensors.clone();
    Ok(ModelParams {
        spec: spec.clone(),
        codec,
        input_height,
        tensors,
        ema,
        meta: TrainMeta::default(),
    })
}

impl<F: Real> ModelParams<F> {
    /// Grow the codec (and the projection tensors) to cover `texts`.
    /// Existing rows are copied bit-identically; columns for new characters
    /// are Glorot-initialized from the stream. No character is ever removed.
    pub fn adapt_codec<'a, I: IntoIterator<Item = &'a str>>(
        &self,
        texts: I,
        rng: &mut Stream,
    ) -> ModelParams<F> {
        let new_codec = self.codec.extended(texts);
        if new_codec.size() == self.codec.size() {
            return self.clone();
        }
        let old_classes = self.codec.num_classes();
        let new_classes = new_codec.num_classes();
        let proj_in = self.tensors.proj.w.nrows();
        let mut out = self.clone();
        let mut draw = glorot::<F>(rng, proj_in, new_classes);
        let mut grow = |proj: &Projection<F>| {
            let mut w = Array2::from_shape_simple_fn((proj_in, new_classes), &mut draw);
            let mut b = Array1::zeros(new_classes);
            for r in 0..proj_in {
                for c in 0..old_classes {
                    w[(r, c)] = proj.w[(r, c)];
                }
            }
            for c in 0..old_classes {
                b[c] = proj.b[c];
            }
            Projection { w, b }
        };
        out.tensors.proj = grow(&self.tensors.proj);
        out.ema.proj = grow(&self.ema.proj);
        out.codec = new_codec;
        out
    }

    /// Downsampling factor from image width to sequence length.
    pub fn width_subsampling(&self) -> usize {
        self.spec.pool_width_product()
    }

    /// Number of output frames for an image of the given width.
    pub fn sequence_length(&self, width: usize) -> usize {
        width / self.spec.pool_width_product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_spec;

    #[test]
    fn codec_sorted_unique_and_blank_reserved() {
        let codec = Codec::from_texts(["baab", "cc a"]);
        assert_eq!(codec.chars(), &[' ', 'a', 'b', 'c']);
        assert_eq!(codec.size(), 4);
        assert_eq!(codec.num_classes(), 5);
        assert_eq!(codec.index_of(' '), Some(1));
        assert_eq!(codec.char_at(0), None);
        assert_eq!(codec.char_at(2), Some('a'));
        assert_eq!(codec.encode("ab").unwrap(), vec![2, 3]);
        assert!(matches!(codec.encode("xyz"), Err(ModelError::Unencodable('x'))));
    }

    #[test]
    fn codec_rejects_duplicates() {
        assert!(Codec::new(vec!['a', 'b', 'a']).is_err());
    }

    #[test]
    fn codec_extension_appends_only() {
        let base = Codec::from_texts(["abc"]);
        let extended = base.extended(["cde"]);
        assert_eq!(extended.chars(), &['a', 'b', 'c', 'd', 'e']);
        // Old indices unchanged.
        for c in ['a', 'b', 'c'] {
            assert_eq!(base.index_of(c), extended.index_of(c));
        }
    }

    #[test]
    fn default_spec_shapes() {
        let spec = parse_spec("conv=40:3x3,pool=2x2,conv=60:3x3,pool=2x2,lstm=200,dropout=0.5")
            .unwrap();
        let codec = Codec::new(('a'..='j').collect()).unwrap();
        let mut rng = crate::rng::keyed_stream(1, "shapes");
        let model = instantiate::<f32>(&spec, 48, codec, &mut rng).unwrap();
        // After two 2x2 pools: height 12, channels 60, lstm input 720.
        match &model.tensors.layers[4] {
            LayerParams::Lstm { fwd, .. } => {
                assert_eq!(fwd.w_ih.dim(), (800, 720));
                assert_eq!(fwd.w_hh.dim(), (800, 200));
            }
            other => panic!("expected lstm, got {other:?}"),
        }
        // Bidirectional concat: 400 -> 11 classes.
        assert_eq!(model.tensors.proj.w.dim(), (400, 11));
        assert_eq!(model.tensors.proj.b.len(), 11);
    }

    #[test]
    fn tiny_spec_projection_dim() {
        let spec = parse_spec("conv=2:3x3,pool=2x2,lstm=4,dropout=0.0").unwrap();
        let codec = Codec::new(vec!['a', 'b', 'c']).unwrap();
        let mut rng = crate::rng::keyed_stream(2, "shapes");
        let model = instantiate::<f64>(&spec, 8, codec, &mut rng).unwrap();
        assert_eq!(model.tensors.proj.w.dim(), (8, 4));
    }

    #[test]
    fn indivisible_height_rejected() {
        let spec = parse_spec("pool=2x2,pool=2x2").unwrap();
        let codec = Codec::new(vec!['a']).unwrap();
        let mut rng = crate::rng::keyed_stream(3, "shapes");
        match instantiate::<f32>(&spec, 30, codec, &mut rng) {
            Err(ModelError::PoolDivisibility { height: 30, product: 4 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn conv_after_lstm_rejected() {
        let spec = parse_spec("lstm=4,conv=2:3x3").unwrap();
        let codec = Codec::new(vec!['a']).unwrap();
        let mut rng = crate::rng::keyed_stream(4, "shapes");
        assert!(matches!(
            instantiate::<f32>(&spec, 8, codec, &mut rng),
            Err(ModelError::SpatialAfterLstm { index: 1 })
        ));
    }

    #[test]
    fn same_seed_identical_tensors() {
        let spec = parse_spec("conv=4:3x3,pool=2x2,lstm=8,dropout=0.5").unwrap();
        let codec = Codec::new(vec!['a', 'b']).unwrap();
        let a = instantiate::<f32>(
            &spec,
            16,
            codec.clone(),
            &mut crate::rng::keyed_stream(7, "init"),
        )
        .unwrap();
        let b =
            instantiate::<f32>(&spec, 16, codec, &mut crate::rng::keyed_stream(7, "init"))
                .unwrap();
        assert_eq!(a.tensors, b.tensors);
        assert_eq!(a.tensors, a.ema);
    }

    #[test]
    fn param_count_is_structural() {
        let spec = parse_spec("conv=2:3x3,pool=2x2,lstm=4,dropout=0.0").unwrap();
        let codec = Codec::new(vec!['a', 'b', 'c']).unwrap();
        let model = instantiate::<f64>(
            &spec,
            8,
            codec,
            &mut crate::rng::keyed_stream(5, "count"),
        )
        .unwrap();
        // conv: 2*1*3*3 + 2; lstm per dir: 16*8 + 16*4 + 16, two dirs;
        // proj: 8*4 + 4.
        let expected = (18 + 2) + 2 * (128 + 64 + 16) + (32 + 4);
        assert_eq!(model.tensors.param_count(), expected);
    }

    #[test]
    fn adapt_codec_grows_projection_and_copies_rows() {
        let spec = parse_spec("lstm=4,dropout=0.0").unwrap();
        let codec = Codec::from_texts(["abcdefghij"]);
        assert_eq!(codec.size(), 10);
        let model = instantiate::<f32>(
            &spec,
            8,
            codec,
            &mut crate::rng::keyed_stream(6, "adapt"),
        )
        .unwrap();
        let adapted = model.adapt_codec(["azk"], &mut crate::rng::keyed_stream(6, "adapt2"));
        assert_eq!(adapted.codec.size(), 12);
        assert_eq!(adapted.tensors.proj.w.dim(), (8, 13));
        // Old columns are bit-identical.
        for r in 0..8 {
            for c in 0..11 {
                assert_eq!(adapted.tensors.proj.w[(r, c)], model.tensors.proj.w[(r, c)]);
            }
        }
        // No-op when nothing is new.
        let same = model.adapt_codec(["abc"], &mut crate::rng::keyed_stream(6, "adapt3"));
        assert_eq!(same.tensors, model.tensors);
        assert_eq!(same.codec, model.codec);
    }
}
