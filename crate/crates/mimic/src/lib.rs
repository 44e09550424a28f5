//! Desk-scale workbench for black-box model extraction.
//!
//! A student network copies a label-only mentor classifier by querying it
//! with convex mixtures of unlabeled images, and is compared against
//! standard soft-label and hard-label mimicking, defense wrappers, and
//! watermark-evasion probes.

pub mod api;
pub mod composite;
pub mod config;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;
