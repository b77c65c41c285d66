//! Learning mixtures of linear dynamical systems.

pub mod batch;
pub mod decomp;
pub mod em;
pub mod experiments;
pub mod io;
pub mod error;
pub mod kalman;
pub mod lds;
pub mod linalg;
pub mod moments;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{MoldsError, Result};
pub use em::EmConfig;
pub use experiments::BenchRecord;
pub use kalman::StatePrior;
pub use lds::{LdsParams, MarkovSeq, MoldsModel, Trajectory};
pub use pipeline::{FitReport, InitMethod};
pub use synth::GenSpec;
