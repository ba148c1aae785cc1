//! Short-notation network grammar.
//!
//! A network is described by a comma-separated list of layer tokens:
//!
//! ```text
//! conv=<filters>:<kh>x<kw> , pool=<ph>x<pw> , lstm=<units> , dropout=<rate>
//! ```
//!
//! e.g. `conv=40:3x3,pool=2x2,lstm=200,dropout=0.5`. Whitespace around
//! tokens is ignored. [`parse_spec`] and [`format_spec`] round-trip.

use std::fmt;
use thiserror::Error;

/// One layer of a parsed network description.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 2D convolution, stride 1, zero "same" padding, ReLU activation.
    Conv { filters: usize, kh: usize, kw: usize },
    /// Max pooling with stride equal to the pool size.
    Pool { ph: usize, pw: usize },
    /// Bidirectional LSTM with `units` cells per direction.
    Lstm { units: usize },
    /// Dropout on the per-frame feature vector (train mode only).
    Dropout { rate: f64 },
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv { filters, kh, kw } => write!(f, "conv={filters}:{kh}x{kw}"),
            Layer::Pool { ph, pw } => write!(f, "pool={ph}x{pw}"),
            Layer::Lstm { units } => write!(f, "lstm={units}"),
            Layer::Dropout { rate } => write!(f, "dropout={rate}"),
        }
    }
}

/// An ordered, validated list of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("empty network spec")]
    Empty,
    #[error("token {index} ({token:?}): {message}")]
    Token {
        index: usize,
        token: String,
        message: String,
    },
    #[error("dropout at layer {index} must follow an lstm layer or be the final layer")]
    DropoutPlacement { index: usize },
}

fn token_err(index: usize, token: &str, message: impl Into<String>) -> SpecError {
    SpecError::Token {
        index,
        token: token.to_string(),
        message: message.into(),
    }
}

fn parse_dims(index: usize, token: &str, text: &str) -> Result<(usize, usize), SpecError> {
    let (a, b) = text
        .split_once('x')
        .ok_or_else(|| token_err(index, token, "expected <h>x<w>"))?;
    let h: usize = a
        .parse()
        .map_err(|_| token_err(index, token, format!("bad integer {a:?}")))?;
    let w: usize = b
        .parse()
        .map_err(|_| token_err(index, token, format!("bad integer {b:?}")))?;
    Ok((h, w))
}

fn parse_layer(index: usize, token: &str) -> Result<Layer, SpecError> {
    let (name, value) = token
        .split_once('=')
        .ok_or_else(|| token_err(index, token, "expected <name>=<value>"))?;
    match name {
        "conv" => {
            let (filters_text, dims_text) = value.split_once(':').ok_or_else(|| {
                token_err(index, token, "expected conv=<filters>:<kh>x<kw>")
            })?;
            if dims_text.contains(':') {
                // htr+ style stride/extension syntax is deliberately not modeled.
                return Err(token_err(index, token, "unsupported network profile"));
            }
            let filters: usize = filters_text
                .parse()
                .map_err(|_| token_err(index, token, format!("bad integer {filters_text:?}")))?;
            let (kh, kw) = parse_dims(index, token, dims_text)?;
            if filters == 0 || kh == 0 || kw == 0 {
                return Err(token_err(index, token, "conv filters and kernel dims must be >= 1"));
            }
            Ok(Layer::Conv { filters, kh, kw })
        }
        "pool" => {
            let (ph, pw) = parse_dims(index, token, value)?;
            if ph == 0 || pw == 0 {
                return Err(token_err(index, token, "pool dims must be >= 1"));
            }
            Ok(Layer::Pool { ph, pw })
        }
        "lstm" => {
            let units: usize = value
                .parse()
                .map_err(|_| token_err(index, token, format!("bad integer {value:?}")))?;
            if units == 0 {
                return Err(token_err(index, token, "lstm units must be >= 1"));
            }
            Ok(Layer::Lstm { units })
        }
        "dropout" => {
            let rate: f64 = value
                .parse()
                .map_err(|_| token_err(index, token, format!("bad float {value:?}")))?;
            if !(0.0..1.0).contains(&rate) {
                return Err(token_err(index, token, "dropout rate must be in [0, 1)"));
            }
            Ok(Layer::Dropout { rate })
        }
        _ => Err(token_err(index, token, "unknown layer (unsupported network profile)")),
    }
}

/// Parse a short-notation string into a validated [`NetworkSpec`].
pub fn parse_spec(text: &str) -> Result<NetworkSpec, SpecError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(SpecError::Empty);
    }
    let mut layers = Vec::new();
    for (index, raw) in trimmed.split(',').enumerate() {
        let token = raw.trim();
        if token.is_empty() {
            return Err(token_err(index, raw, "empty token"));
        }
        layers.push(parse_layer(index, token)?);
    }
    // A dropout layer is only meaningful right after an lstm or as the
    // network-final layer.
    for (i, layer) in layers.iter().enumerate() {
        if matches!(layer, Layer::Dropout { .. }) {
            let after_lstm = i > 0 && matches!(layers[i - 1], Layer::Lstm { .. });
            let is_last = i + 1 == layers.len();
            if !after_lstm && !is_last {
                return Err(SpecError::DropoutPlacement { index: i });
            }
        }
    }
    Ok(NetworkSpec { layers })
}

/// Canonical text form; `parse_spec(format_spec(s)) == s`.
pub fn format_spec(spec: &NetworkSpec) -> String {
    spec.layers
        .iter()
        .map(Layer::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl NetworkSpec {
    /// Product of pool heights: the input height must be divisible by this.
    pub fn pool_height_product(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Pool { ph, .. } => ph,
                _ => 1,
            })
            .product()
    }

    /// Product of pool widths: the horizontal subsampling factor, i.e. the
    /// ratio between image width and output sequence length.
    pub fn pool_width_product(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Pool { pw, .. } => pw,
                _ => 1,
            })
            .product()
    }

    /// Dropout rate applied after every lstm layer. A trailing dropout
    /// token attaches its rate to all lstm layers of the network.
    pub fn lstm_dropout_rate(&self) -> f64 {
        match self.layers.last() {
            Some(&Layer::Dropout { rate }) => rate,
            _ => 0.0,
        }
    }
}
