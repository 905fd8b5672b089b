pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod flow;
pub mod objective;
pub mod prior;
pub mod train;

pub use checkpoint::{Checkpoint, ModelKind};
pub use diffcore::{Array, Tape, Var};
pub use error::{Error, Result};
pub use flow::{FlowModel, FlowSpec, Layer, LayerSpec, Mask};
pub use objective::{LossBreakdown, ObjectiveMode};
pub use prior::{EigenReport, ManifoldPrior};
pub use train::{ExperimentConfig, Schedule};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
