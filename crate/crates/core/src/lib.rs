//! Audio-image-text contrastive transfer with temporal frame pairing.
//!
//! Numeric modules are generic over [`scalar::Real`]; the aliases below fix
//! the precision for the common cases. Training runs in `f32`.

pub mod encoders;
pub mod error;
pub mod io;
pub mod manifest;
pub mod objective;
pub mod optim;
pub mod pairing;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};

pub type Embedding32 = encoders::Embedding<f32>;
pub type Embedding64 = encoders::Embedding<f64>;
pub type EncoderParams32 = encoders::EncoderParams<f32>;
pub type EncoderParams64 = encoders::EncoderParams<f64>;
pub type FrameSet32 = pairing::FrameSet<f32>;
pub type FrameSet64 = pairing::FrameSet<f64>;
pub type FbankMatrix32 = signal::FbankMatrix<f32>;
pub type FbankMatrix64 = signal::FbankMatrix<f64>;
pub type Waveform32 = signal::Waveform<f32>;
pub type Waveform64 = signal::Waveform<f64>;
pub type SimilarityMatrix32 = objective::SimilarityMatrix<f32>;
pub type SimilarityMatrix64 = objective::SimilarityMatrix<f64>;
pub type Lars32 = optim::Lars<f32>;
pub type Lars64 = optim::Lars<f64>;
