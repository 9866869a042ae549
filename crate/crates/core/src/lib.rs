//! Scribble-supervised camouflaged object detection.
//!
//! The crate is organised the way a training run flows:
//!
//! - [`data`]: dataset layout, scribble rasters, paired augmentation and a
//!   synthetic camouflage generator.
//! - [`views`]: geometric view transforms used by the cross-view consistency
//!   term, with exact alignment of predictions between views.
//! - [`objectives`]: partial cross-entropy, reliable cross-view and
//!   inside-view consistency, context affinity and semantic significance
//!   losses, and their composition.
//! - [`crnet`]: the contrast-and-relation network (ResNet backbone, LCC, LSR
//!   and AGE blocks, five supervised outputs).
//! - [`metrics`]: MAE, S-measure, E-measure and weighted F-measure.
//! - [`pipeline`]: configuration, training, checkpoints and inference.

pub mod crnet;
pub mod data;
mod error;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod resample;
pub mod views;

pub use error::{Error, Result};
