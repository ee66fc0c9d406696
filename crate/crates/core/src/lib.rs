//! Modality-inconsistent continual learning on a toy multimodal language
//! model: synthetic data, the model and its losses, pseudo-target
//! generation, instruction distillation, the task-sequential trainer and
//! the evaluation arithmetic.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod ikd;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod ptgm;
pub mod replay;
pub mod report;
pub mod syndata;
pub mod trainer;
pub mod types;
pub mod vocab;

pub use config::{FusionMode, Method, RunConfig};
pub use error::{Error, Result};
pub use types::{LearnedState, Modality, PseudoSample, Sample, TaskDescriptor, TaskType};
pub use vocab::Vocabulary;
