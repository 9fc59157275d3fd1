//! Two-stage tunnel-lining crack inspection.
//!
//! Stage one classifies lining images as crack or background with a
//! dense-connectivity CNN; stage two extracts crack pixels from the selected
//! images with an atrous encoder-decoder segmenter; a score-weighted
//! activation-mapping explainer turns any tapped layer into a saliency
//! heatmap. Everything runs on a self-contained f64 tensor core with
//! reverse-mode differentiation, so gradients and kernels are verifiable
//! against independent oracles.
//!
//! Modules:
//! - [`tensor`] — dense tensors, the differentiable op set, autograd.
//! - [`models`] — declarative graphs plus the classifier and segmenter builders.
//! - [`scorecam`] — masked-forward channel weighting and heatmap assembly.
//! - [`metrics`] — classification accuracy, FPS, pixel scores, detection rule.
//! - [`data`] — manifests, image/mask loading, splits, weight bundles, synthetic corpora.
//! - [`pipeline`] — two-stage orchestration, training loops, report emission.
//!
//! The `crackscan` binary exposes the pipeline as subcommands; the crate's
//! `examples/` directory shows each capability as a runnable program.

pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod scorecam;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
