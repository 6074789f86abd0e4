//! Explainable property prediction over bracketed molecular strings: a small
//! transformer classifier, information-flow token attributions with an
//! alignment loss, a planted-motif data generator and an evolutionary editor.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the scalar to `f64`.

pub mod data;
pub mod editor;
pub mod encoder;
pub mod explain;
pub mod grammar;
pub mod numerics;
pub mod rng;
pub mod scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape64 = numerics::Tape<f64>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
pub type ForwardTrace64 = encoder::ForwardTrace<f64>;
pub type ImportanceScores64 = explain::ImportanceScores<f64>;
