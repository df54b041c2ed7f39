//! Layer-wise probing and filter-importance analysis for trained CNNs.
//!
//! A model is loaded from a JSON manifest plus a raw `f32` weights blob and
//! run with activation capture at named taps. Each tap's feature maps are
//! fed through the frozen classifier head to get a per-layer prediction,
//! their per-filter means are regressed on that prediction with ridge
//! regression, and the resulting coefficients are tested, correlated across
//! taps and ranked.

pub mod augment;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fmt;
pub mod model;
pub mod probe;
pub mod report;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{load_model, ActivationStore, ModelGraph, TapPoint};
pub use probe::{probe_dataset, probe_forward, ProbeTable};
pub use tensor::{Shape4, Tensor};
