//! Dynamic compressive sensing by approximate message passing.
//!
//! Recovers a time series of sparse complex vectors from per-frame
//! underdetermined linear measurements, using a Markov model for the support
//! and a Gauss-Markov model for the amplitudes.

// `!(x > 0.0)` guards deliberately reject NaN; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ampcore;
pub mod em;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod posterior;
pub mod scheduler;

pub use ampcore::{amp_frame, AmpConfig, AmpFrameState, LocalPrior};
pub use em::{em_loop, em_update, init_heuristics, EmConfig, EmOutcome, EmTrace};
pub use error::{Error, Result};
pub use linalg::{DenseMatrix, LinearOperator, C64};
pub use model::{generate_synthetic, Dims, DynamicDataset, GroundTruth, ModelParams};
pub use posterior::PosteriorEstimates;
pub use scheduler::{filter, smooth, DcsAmp, MessageState, Mode, SolverConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
