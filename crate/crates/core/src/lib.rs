//! Differentiable microfacet-field inverse rendering with disentangled
//! material fields, plus a perturbation and fine-tuning harness for studying
//! how scene properties compensate for one another.

pub mod diffmath;
pub mod error;
pub mod fields;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod perturb;
pub mod renderer;
pub mod shading;

pub use error::{Error, Result};
