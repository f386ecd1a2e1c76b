//! Hierarchical state tokenization (HST) for multivariate time series.
//!
//! The pipeline: a spatio-temporal attention encoder fuses per-timepoint and
//! per-channel views of a windowed series, a state-space backbone produces
//! transition states `h_t` and output states `o_t`, and a two-level vector
//! quantizer with error feedback and usage-based code revival turns both
//! streams into discrete tokens. A transformer decoder reconstructs the input
//! from the quantized embeddings; downstream, token dynamics feed a frozen-
//! quantizer classifier and group-level occupancy statistics.

pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod params;
pub mod quant;
pub mod recon;
pub mod rng;
pub mod ssm;
pub mod stats;
pub mod stencoder;
pub mod train;

pub use error::{HstError, Result};
pub use linalg::Mat;
