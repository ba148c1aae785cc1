//! The line recognizer: a convolutional-recurrent network built from a
//! parsed [`NetworkSpec`](crate::netspec::NetworkSpec), trained with CTC
//! loss and exact hand-derived gradients.
//!
//! Everything numeric is generic over [`Real`] (`f32` for training, `f64`
//! for gradient checking). Inference and validation read the EMA shadow
//! tensors; training updates the raw tensors.

mod ctc;
mod decode;
mod io;
mod layers;
mod model;
mod train;

pub use ctc::{ctc_loss, ctc_loss_bruteforce, CtcError};
pub use decode::greedy_decode;
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use layers::{backward, forward, forward_full, ForwardCache};
pub use model::{
    instantiate, Codec, LayerParams, LstmDir, ModelError, ModelParams, NetTensors, Projection,
    TrainMeta,
};
pub use train::{train_step, OptState, TrainHyper};

use num_traits::Float;

/// Scalar type for network math. `f32` is the training default; `f64`
/// backs the finite-difference gradient checks.
pub trait Real:
    ndarray::LinalgScalar + Float + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Time-major logits, `T x (codec size + 1)`; column 0 is the CTC blank.
pub type LogitMatrix<F> = ndarray::Array2<F>;

/// A decoded line: characters with per-character confidence and the frame
/// index where each character's argmax run starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub chars: String,
    pub confidences: Vec<f64>,
    pub positions: Vec<usize>,
    pub line_ref: String,
}

impl Prediction {
    pub fn empty(line_ref: String) -> Self {
        Prediction { chars: String::new(), confidences: Vec::new(), positions: Vec::new(), line_ref }
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }
}
