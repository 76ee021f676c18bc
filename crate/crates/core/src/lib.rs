//! Cross-modal prompting for multi-modal classification and regression
//! under missing modalities.
//!
//! The crate covers the masked data model, the two-stage training scheme
//! (per-modality encoders, then prototype prompts, knowledge propagation and
//! coordinator fusion with gradient modulation), evaluation sweeps and the
//! report artifacts. Tensors are `ndarray` matrices of `f64`; gradients come
//! from the small reverse-mode tape in [`autograd`].

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompting;
pub mod propagation;
pub mod training;

pub use config::{Ablation, Config};
pub use data::{Dataset, MissingMask, Modality};
pub use error::{CompError, Result};
pub use evaluation::{run_experiment, RunReport};
pub use model::{CompModel, Stage};
