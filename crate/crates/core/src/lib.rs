//! Bayesian 1-D convolutional networks for atrial-fibrillation detection
//! from photoplethysmography (PPG) signals.
//!
//! The crate trains networks whose weights carry factorized Gaussian
//! posteriors, learned by minimizing a minibatch-weighted variational
//! cost with backpropagation. Inference averages Monte Carlo draws from
//! the weight posterior and scores each decision with its aleatoric
//! uncertainty, which doubles as a signal-quality proxy: predictions on
//! noisy segments can be filtered by an uncertainty threshold.
//!
//! Module map:
//!
//! * [`tensor`], [`ops`], [`tape`] — the differentiable numerics
//!   substrate (dense `f32` tensors, forward kernels, reverse-mode AD).
//! * [`bayes`] — variational posteriors, weight sampling, local
//!   reparameterization, KL terms.
//! * [`network`] — the nine-stage conv architecture and its checkpoint
//!   surface ([`checkpoint`]).
//! * [`trainer`] — minibatch training with the weighted KL schedule and
//!   Adam, plus validation-based model selection.
//! * [`inference`] — Monte Carlo prediction, uncertainty scoring, and
//!   accept/abstain thresholding.
//! * [`data`], [`synth`] — preprocessing, segment files, subject splits,
//!   and the synthetic PPG generator.
//! * [`metrics`] — the evaluation metric battery and threshold sweeps.
//! * [`runcfg`] — flat key-value run configuration for the CLI.

pub mod bayes;
pub mod checkpoint;
pub mod data;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod runcfg;
pub mod seeds;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use bayes::{NoiseDraw, PriorSpec, SampleMode, VariationalTensor};
pub use data::Segment;
pub use inference::{predict, predict_batch, Prediction, ThresholdPolicy};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use network::{Network, NetworkConfig};
pub use tape::Tape;
pub use tensor::Tensor;
pub use trainer::{train, TrainConfig};
