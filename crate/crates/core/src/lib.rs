//! Latent time joint mixed-effects models for multicohort longitudinal data.
//!
//! Each outcome follows a linear mixed model in short-term follow-up time,
//! shifted by a subject-specific latent time shared across outcomes. The
//! crate fits the model with dynamic Hamiltonian Monte Carlo and provides
//! information criteria, convergence diagnostics, a simulation harness and
//! trajectory prediction.

pub mod diagnostics;
pub mod error;
pub mod identifiability;
pub mod io;
mod linalg;
pub mod model_compare;
pub mod model_spec;
pub mod posterior;
pub mod predict;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
pub use model_spec::{
    layout, validate_dataset, Dataset, ModelConfig, Observation, ParameterLayout, ParameterSet,
    RandomEffects, ValidationReport,
};
pub use sampler::{run, DrawsMatrix, SamplerSettings};
