//! Geometry-aware transformer captioning on a small reverse-mode autodiff
//! core: region encoder with box-embedded attention, position-LSTM decoder,
//! training, decoding, metrics and a synthetic spatial-scene dataset.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod scenes;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use config::{GeometryMode, GluPlacement, ModelConfig, PositionMode};
pub use encoder::RegionSet;
pub use error::{GatError, Result};
pub use params::ModelParams;
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
