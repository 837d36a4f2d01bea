//! Bi-level safety monitoring for multi-step denoising trajectories.
//!
//! A denoising language model emits a hidden state per denoising step; a
//! lightweight probe scores each step and the *signed margin* of that score
//! tells us how close the step sits to the decision boundary. Steps inside a
//! small margin band are *hesitation steps*, and their count per trajectory
//! is a cheap, probe-intrinsic difficulty estimate. This crate implements the
//! full pipeline around that idea:
//!
//! - [`trajectory`]: the step-major trajectory data model and its binary
//!   dataset format, token pooling, and window slicing.
//! - [`normalize`]: per-feature / per-step activation normalization.
//! - [`probes`]: four probe architectures (linear, MLP, temporal attention,
//!   LSTM) with hand-written forward passes, analytic gradients, parameter
//!   counts, and analytic FLOPs.
//! - [`train`]: Adam, stratified splitting, grid search.
//! - [`hesitation`]: margins, hesitation profiles, out-of-fold scoring,
//!   threshold selection, and margin-dynamics statistics.
//! - [`cascade`]: the bi-level monitor — a linear base probe routes
//!   high-hesitation trajectories to a windowed expert probe.
//! - [`metrics`]: confusion-matrix scores and evaluation reports.
//! - [`synth`]: a seeded synthetic world where hesitation genuinely predicts
//!   difficulty, for end-to-end validation at desk scale.
//!
//! The `d2m` binary exposes the same pipeline as subcommands; see the
//! crate-level `examples/` directory for runnable walkthroughs of each
//! capability.

pub mod cascade;
pub mod cli;
pub mod error;
pub mod hesitation;
pub mod manifest;
pub mod metrics;
pub mod normalize;
pub mod probes;
pub mod synth;
pub mod train;
pub mod trajectory;
pub(crate) mod util;

pub use cascade::{CascadeBundle, RouteRecord};
pub use error::{D2Error, Result};
pub use hesitation::{HesitationProfile, OofMargins};
pub use metrics::{Confusion, Report, Scores};
pub use normalize::{NormMode, NormStats};
pub use probes::{Arch, Probe, ProbeSpec, Readout};
pub use synth::SynthConfig;
pub use train::{GridSpace, TrainConfig};
pub use trajectory::{Dataset, RawDataset, RawTrajectory, Trajectory};
