//! Subgroup-level bias auditing for CNN image classifiers.
//!
//! The pipeline discovers underperforming subgroups from last-layer features,
//! pairs each with its nearest well-performing subgroup, and attributes the gap
//! to neurons, concept patches and saliency maps. Results land in a versioned
//! artifact directory consumed by the read-only API.

pub mod artifact;
pub mod error;
pub mod dataset;
pub mod demo;
pub mod model;
pub mod neuron_clusters;
pub mod neurons;
pub mod patches;
pub mod pipeline;
pub mod saliency;
pub mod subgroups;
pub mod synthetic;

pub use error::{AuditError, Result};
