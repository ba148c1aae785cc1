//! Training and evaluation pipeline for handwritten text line recognition.
//!
//! The crate is organized around a small set of stages: PAGE XML ground
//! truth handling ([`pagexml`]), line image preprocessing ([`lineproc`]),
//! a short-notation network grammar ([`netspec`]), a CTC line recognizer
//! with exact gradients ([`recognizer`]), training protocols with balanced
//! selection and early stopping ([`protocol`]), cross-fold voting ensembles
//! ([`ensemble`]), error-rate evaluation ([`eval`]), and an experiment
//! harness with a synthetic corpus generator ([`harness`]).
//!
//! All randomness flows from a single user-supplied seed through keyed
//! [`rng`] streams, so any two runs with the same configuration produce
//! identical results.

pub mod ensemble;
pub mod eval;
pub mod harness;
pub mod lineproc;
pub mod netspec;
pub mod pagexml;
pub mod protocol;
pub mod recognizer;
pub mod rng;
