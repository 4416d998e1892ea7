//! Small audio CNNs on a device-shifted synthetic task, filter-normalized
//! loss landscapes around trained minima, and ε-sharpness studies.

pub mod audio;
pub mod checkpoint;
pub mod error;
pub mod json_float;
pub mod landscape;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod sharpness;
pub mod study;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use error::{Error, Result};
pub use landscape::{DirectionPair, ScanRange, SurfaceGrid};
pub use nn::{build_model, Arch, ModelSpec, ModelState, ParamVector, QuadraticModel};
pub use optim::{OptimConfig, OptimKind};
pub use sharpness::{epsilon_sharpness, pearson, SharpnessConfig, SharpnessResult};
pub use study::{GridSpec, StudyRecord};
pub use synth::{generate_dataset, Dataset, Device, SynthConfig};
pub use tensor::{Graph, NodeId, Scalar, Tensor};
pub use train::{train, EpochLog, TrainConfig};
