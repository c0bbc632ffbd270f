//! Monte Carlo predictive inference with aleatoric-uncertainty scoring.
//!
//! Each prediction averages `n` stochastic forward passes with freshly
//! sampled weights: the class probabilities are the per-draw softmax
//! outputs averaged, and the 2x2 uncertainty matrix is the mean of the
//! per-draw categorical covariances `diag(p) - p p^T`. The scalar score
//! is the mean of the matrix diagonal; for two classes that equals the
//! mean over draws of `p0 * p1`, so it lives in [0, 0.25].

use std::fmt;

use serde::Serialize;

use crate::bayes::{NoiseDraw, SampleMode};
use crate::network::{Network, NetworkError};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum InferenceError {
    ZeroDraws,
    NegativeThreshold(f64),
    Network(NetworkError),
}

impl fmt::Display for InferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceError::ZeroDraws => write!(f, "prediction requires at least one draw"),
            InferenceError::NegativeThreshold(t) => {
                write!(f, "uncertainty threshold must be non-negative, got {}", t)
            }
            InferenceError::Network(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for InferenceError {}

impl From<NetworkError> for InferenceError {
    fn from(e: NetworkError) -> Self {
        InferenceError::Network(e)
    }
}

/// Accept/abstain policy on the scalar uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPolicy {
    threshold: Option<f64>,
}

impl ThresholdPolicy {
    /// `None` accepts everything.
    pub fn new(threshold: Option<f64>) -> Result<Self, InferenceError> {
        if let Some(t) = threshold {
            if t.is_nan() || t < 0.0 {
                return Err(InferenceError::NegativeThreshold(t));
            }
        }
        Ok(ThresholdPolicy { threshold })
    }

    pub fn none() -> Self {
        ThresholdPolicy { threshold: None }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn accepts(&self, u_scalar: f64) -> bool {
        match self.threshold {
            Some(t) => u_scalar <= t,
            None => true,
        }
    }
}

/// Monte-Carlo-averaged prediction for one segment.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Averaged class probabilities `[p_non_af, p_af]`; sums to one.
    pub p_mean: [f64; 2],
    /// Mean categorical covariance over draws; symmetric, PSD.
    pub u_matrix: [[f64; 2]; 2],
    /// Mean of the matrix diagonal, in [0, 0.25].
    pub u_scalar: f64,
    /// argmax of `p_mean`; an exact tie resolves to 0 (non-AF).
    pub label: u8,
    pub accepted: bool,
    pub n_draws: usize,
    /// Per-draw probabilities, retained on request.
    pub per_draw: Option<Vec<[f64; 2]>>,
}

impl Prediction {
    /// Degenerate prediction for tests and tooling.
    pub fn point(label: u8, p_af: f64, u_scalar: f64) -> Self {
        Prediction {
            p_mean: [1.0 - p_af, p_af],
            u_matrix: [[u_scalar, -u_scalar], [-u_scalar, u_scalar]],
            u_scalar,
            label,
            accepted: true,
            n_draws: 1,
            per_draw: None,
        }
    }
}

/// JSON-lines record emitted per segment by batch prediction.
#[derive(Debug, Serialize)]
pub struct PredictionRecord {
    pub segment_id: usize,
    pub p_af: f64,
    pub u_scalar: f64,
    pub label: u8,
    pub accepted: bool,
}

impl PredictionRecord {
    pub fn new(segment_id: usize, p: &Prediction) -> Self {
        PredictionRecord {
            segment_id,
            p_af: p.p_mean[1],
            u_scalar: p.u_scalar,
            label: p.label,
            accepted: p.accepted,
        }
    }
}

/// Predict a whole batch (`[B, 1, L]`), sharing the `n` weight draws
/// across segments. Each draw runs the network in eval phase with
/// explicitly sampled weights.
pub fn predict_batch(
    net: &Network,
    batch: &Tensor,
    n_draws: usize,
    seed: u64,
    keep_draws: bool,
) -> Result<Vec<Prediction>, InferenceError> {
    if n_draws == 0 {
        return Err(InferenceError::ZeroDraws);
    }
    let b = batch.shape()[0];
    let mut p_sum = vec![[0.0f64; 2]; b];
    let mut cov_sum = vec![[[0.0f64; 2]; 2]; b];
    let mut draws: Vec<Vec<[f64; 2]>> = if keep_draws { vec![Vec::new(); b] } else { Vec::new() };

    for k in 0..n_draws {
        let mut noise = NoiseDraw::gaussian(seed, k as u64);
        let (logits, _) = net.forward_eval(batch, SampleMode::WeightSample, &mut noise)?;
        let probs = ops::softmax_rows_f64(&logits);
        for (bi, p) in probs.iter().enumerate() {
            debug_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
            p_sum[bi][0] += p[0];
            p_sum[bi][1] += p[1];
            // diag(p) - p p^T; both diagonal entries equal p0 * p1.
            let d0 = p[0] - p[0] * p[0];
            let d1 = p[1] - p[1] * p[1];
            debug_assert!((d0 - d1).abs() < 1e-9);
            cov_sum[bi][0][0] += d0;
            cov_sum[bi][1][1] += d1;
            cov_sum[bi][0][1] -= p[0] * p[1];
            cov_sum[bi][1][0] -= p[0] * p[1];
            if keep_draws {
                draws[bi].push(*p);
            }
        }
    }

    let inv = 1.0 / n_draws as f64;
    Ok((0..b)
        .map(|bi| {
            let p_mean = [p_sum[bi][0] * inv, p_sum[bi][1] * inv];
            let u_matrix = [
                [cov_sum[bi][0][0] * inv, cov_sum[bi][0][1] * inv],
                [cov_sum[bi][1][0] * inv, cov_sum[bi][1][1] * inv],
            ];
            let u_scalar = (u_matrix[0][0] + u_matrix[1][1]) / 2.0;
            let label = if p_mean[1] > p_mean[0] { 1 } else { 0 };
            Prediction {
                p_mean,
                u_matrix,
                u_scalar,
                label,
                accepted: true,
                n_draws,
                per_draw: keep_draws.then(|| draws[bi].clone()),
            }
        })
        .collect())
}

/// Predict a single segment shaped `[1, L]`.
pub fn predict(
    net: &Network,
    segment: &Tensor,
    n_draws: usize,
    seed: u64,
) -> Result<Prediction, InferenceError> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(segment.shape());
    let batch = segment.clone().reshape(shape).map_err(NetworkError::from)?;
    let mut preds = predict_batch(net, &batch, n_draws, seed, false)?;
    Ok(preds.remove(0))
}

/// Partition predictions by the policy, setting `accepted` flags.
pub fn apply_threshold(
    preds: Vec<Prediction>,
    policy: &ThresholdPolicy,
) -> (Vec<Prediction>, Vec<Prediction>) {
    let mut accepted = Vec::new();
    let mut abstained = Vec::new();
    for mut p in preds {
        p.accepted = policy.accepts(p.u_scalar);
        if p.accepted {
            accepted.push(p);
        } else {
            abstained.push(p);
        }
    }
    (accepted, abstained)
}

/// Average prediction statistics from explicit per-draw probabilities.
/// This is the same algebra as [`predict_batch`] without a network, for
/// direct verification of the uncertainty arithmetic.
pub fn aggregate_draws(draws: &[[f64; 2]]) -> Prediction {
    assert!(!draws.is_empty());
    let inv = 1.0 / draws.len() as f64;
    let mut p_mean = [0.0f64; 2];
    let mut u = [[0.0f64; 2]; 2];
    for p in draws {
        p_mean[0] += p[0];
        p_mean[1] += p[1];
        u[0][0] += p[0] - p[0] * p[0];
        u[1][1] += p[1] - p[1] * p[1];
        u[0][1] -= p[0] * p[1];
        u[1][0] -= p[0] * p[1];
    }
    p_mean[0] *= inv;
    p_mean[1] *= inv;
    for row in &mut u {
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    let u_scalar = (u[0][0] + u[1][1]) / 2.0;
    Prediction {
        p_mean,
        u_matrix: u,
        u_scalar,
        label: if p_mean[1] > p_mean[0] { 1 } else { 0 },
        accepted: true,
        n_draws: draws.len(),
        per_draw: Some(draws.to_vec()),
    }
}
