//! Adaptive segmentation mask attack, algorithmic core.
//!
//! Everything here is pure computation over owned buffers: a small dense
//! tensor type with a define-by-run reverse-mode tape, a compact
//! encoder/decoder segmentation network and its SGD trainer, a synthetic
//! ellipse dataset, segmentation metrics, and the targeted attack itself
//! (static mask, adaptive mask, and adaptive mask with the dynamic
//! perturbation multiplier).
//!
//! The crate is `no_std` and only needs `alloc`. File formats are exposed as
//! byte encoders/decoders; the `asma` crate does the actual IO.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attack;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod rng;
pub mod segnet;
pub mod synthdata;
pub mod tensor;

pub use attack::{
    AttackConfig, AttackReport, AttackState, GradientSource, TraceEntry, Variant,
};
pub use error::{Error, Result};
pub use mask::LabelMask;
pub use metrics::{AccuracyReport, DistanceReport};
pub use segnet::{ModelParams, Sample, SegNet};
pub use synthdata::GenConfig;
pub use tensor::{Graph, NodeId, Tensor};
