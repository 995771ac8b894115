//! Speaker-verification back-end library.
//!
//! Takes pre-extracted fixed-dimensional speaker embeddings and provides
//! everything downstream of the extractor:
//!
//! - [`data`]: embedding sets, trial lists, score sets and their file formats
//! - [`preprocess`]: centering, LDA, length normalization, diagonalization
//! - [`gplda`]: generative two-covariance PLDA (EM training, exact LLR scoring)
//! - [`nplda`]: discriminative pairwise model trained on a soft detection cost
//! - [`trials`]: gender-matched trial sampling
//! - [`metrics`]: detection costs, EER, DET points
//! - [`postproc`]: adaptive score normalization, calibration, fusion
//! - [`synth`]: synthetic data generation and brute-force oracles
//! - [`model_io`]: the binary model container

pub mod data;
pub mod error;
pub mod gplda;
pub mod linalg;
pub mod metrics;
pub mod model_io;
pub mod nplda;
pub mod postproc;
pub mod preprocess;
pub mod synth;
pub mod trials;

pub use error::{Error, Result};
