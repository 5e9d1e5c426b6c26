//! Slice-aware multi-branch decoder (SAMBD) for 2.5D segmentation of
//! anisotropic volumes.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a tape-based reverse-mode autodiff graph,
//!   convolution kernels, SGD with momentum and a finite-difference checker.
//! * [`model`]: the multi-slice encoder with ASPP, the slice-centric attention
//!   block, the multi-branch and single-branch decoders, checkpoints and
//!   parameter/FLOP accounting.
//! * [`losses`]: Dice, pairwise Dice and the densely connected Dice objective.
//! * [`volume`]: the SVOL volume format, HU windowing, z resampling,
//!   augmentation, window extraction and the anisotropic phantom generator.
//! * [`inference`]: sliding-window prediction and connected-component
//!   postprocessing.
//! * [`metrics`]: overlap and surface-distance metrics and the paired t-test.
//! * [`experiment`]: training, evaluation and the ablation harness behind the
//!   `sambd` command-line tool.

pub mod error;
pub mod experiment;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
