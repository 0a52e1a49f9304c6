//! Precipitation nowcasting toolkit.
//!
//! Builds rainfall forecasts from multi-band satellite image sequences:
//! temporal frame interpolation for training-time augmentation, ordinal
//! rainfall binning with a Multi-Level Dice loss, a desk-scale trainable
//! 2D U-Net with hand-written backprop and AdamW, CSI/F1 verification, and
//! a deterministic synthetic data generator for end-to-end experiments.

pub mod augment;
pub mod binning;
pub mod dataio;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use binning::{ProbabilityField, RainBins};
pub use tensor::{RngState, Tensor};
