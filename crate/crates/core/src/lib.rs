//! Few-shot object detection for novel classes at inference time.
//!
//! A shared backbone extracts a feature pyramid from a query image and from a
//! handful of support chips per class. Support features guide a region
//! proposal network across scales, shots are aggregated into a prototype, and
//! a relation head scores and refines each proposal against the prototype.
//! Novel classes need only support images; no parameter is updated.

pub mod aggregation;
pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod model;
pub mod nn;
pub mod proposal;
pub mod relation;
pub mod tensor;
pub mod train;

pub use boxes::BBox;
pub use config::{ArchConfig, Config};
pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
