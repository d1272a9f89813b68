//! Trainable localized level-set active contours.
//!
//! A small encoder-decoder predicts per-pixel parameter maps and an initial
//! level set; the level set is then evolved for a fixed number of explicit
//! steps under a localized region energy. Every step is differentiable, so
//! the segmentation loss on the final contour trains the network end to end.
//!
//! Module map:
//!
//! * [`field`]: rasters, stencils, window sums, Heaviside/Dirac, distance maps
//! * [`evolution`]: forward contour evolution and its energy
//! * [`adjoint`]: reverse-mode gradients through the unrolled evolution
//! * [`predictor`]: the encoder-decoder, its backward pass and checkpoints
//! * [`loss`] and [`metrics`]: training loss and evaluation scores
//! * [`train`]: optimizer, learning-rate schedule, training and evaluation
//! * [`io`], [`synth`], [`config`], [`sweep`]: files, data and experiment harness

pub mod adjoint;
pub mod config;
pub mod error;
pub mod evolution;
pub mod field;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod predictor;
pub mod sweep;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use evolution::{evolve, evolve_final, EvolutionConfig, EvolutionTrace};
pub use field::{Field, ImageGrid, LevelSet, Mask, ParameterMaps};
