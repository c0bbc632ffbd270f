//! Minibatch variational training: per-minibatch weighted KL plus
//! likelihood cost, Adam updates, seeded shuffling, and validation-based
//! model selection.
//!
//! Per epoch, minibatch `i` of `M` weighs its KL term by
//! `lambda_i = 2^(M-i) / (2^M - 1)` times a global scale; the weights sum
//! to the scale across the epoch. The cost of one minibatch sums, over
//! `n` Monte Carlo draws, `lambda_i * kl_draw + nll_draw`. Under weight
//! sampling the KL term is the per-draw Monte Carlo estimate; under local
//! reparameterization weights are never materialized, so the closed-form
//! KL is used instead. Both estimate the same objective.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bayes::{NoiseDraw, SampleMode};
use crate::data::Segment;
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::network::{NetLeaves, Network, NetworkError};
use crate::ops;
use crate::seeds;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug)]
pub enum TrainError {
    BadConfig(String),
    EmptySet(&'static str),
    SubjectOverlap(String),
    UnlabeledSegment(usize),
    LambdaIndex { i: usize, m: usize },
    SingletonMinibatch { batch_size: usize, set_size: usize },
    NonFiniteLoss { epoch: usize, minibatch: usize },
    Network(NetworkError),
    Tape(TapeError),
    Shape(ShapeError),
    Metrics(MetricsError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "invalid train config: {}", msg),
            TrainError::EmptySet(which) => write!(f, "{} set is empty", which),
            TrainError::SubjectOverlap(id) => {
                write!(f, "subject {} appears in both train and validation sets", id)
            }
            TrainError::UnlabeledSegment(i) => write!(f, "segment {} has no label", i),
            TrainError::LambdaIndex { i, m } => {
                write!(f, "minibatch index {} outside 1..={}", i, m)
            }
            TrainError::SingletonMinibatch { batch_size, set_size } => write!(
                f,
                "batch size {} leaves a 1-sample final minibatch over {} segments \
                 (undefined batch statistics); adjust batch size",
                batch_size, set_size
            ),
            TrainError::NonFiniteLoss { epoch, minibatch } => {
                write!(f, "non-finite loss at epoch {}, minibatch {}", epoch, minibatch)
            }
            TrainError::Network(e) => write!(f, "{}", e),
            TrainError::Tape(e) => write!(f, "{}", e),
            TrainError::Shape(e) => write!(f, "{}", e),
            TrainError::Metrics(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NetworkError> for TrainError {
    fn from(e: NetworkError) -> Self {
        TrainError::Network(e)
    }
}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}

impl From<ShapeError> for TrainError {
    fn from(e: ShapeError) -> Self {
        TrainError::Shape(e)
    }
}

impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        TrainError::Metrics(e)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Monte Carlo draws per minibatch.
    pub mc_draws: usize,
    /// Global KL scale applied on top of the per-minibatch weights.
    pub kl_scale: f64,
    pub mode: SampleMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            learning_rate: 1e-3,
            epochs: 50,
            mc_draws: 1,
            kl_scale: 1e-5,
            mode: SampleMode::LocalReparam,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(
                "batch_size must be >= 2 (batch statistics)".into(),
            ));
        }
        if self.mc_draws == 0 {
            return Err(TrainError::BadConfig("mc_draws must be >= 1".into()));
        }
        if self.kl_scale < 0.0 {
            return Err(TrainError::BadConfig("kl_scale must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if self.mode == SampleMode::MeanOnly {
            return Err(TrainError::BadConfig(
                "training mode must be weight-sample or local-reparam".into(),
            ));
        }
        Ok(())
    }
}

/// Per-minibatch KL weight: `2^(M-i) / (2^M - 1) * kl_scale` for
/// 1-based `i`. Computed as `2^-i / (1 - 2^-M)` so it never overflows.
pub fn lambda_schedule(i: usize, m: usize, kl_scale: f64) -> Result<f64, TrainError> {
    if i < 1 || i > m {
        return Err(TrainError::LambdaIndex { i, m });
    }
    let numerator = (-(i as f64)).exp2();
    let denominator = 1.0 - (-(m as f64)).exp2();
    Ok(numerator / denominator * kl_scale)
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update on a single tensor. Moments are kept
/// in 64-bit; the parameter rounds to storage precision once per step.
/// `step` is the 1-based step count.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hp: &AdamParams,
) -> Result<(), TrainError> {
    if param.shape() != grad.shape() {
        return Err(TrainError::Shape(ShapeError::new(
            "adam_step",
            format!("param shape {:?} vs grad shape {:?}", param.shape(), grad.shape()),
        )));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for ((p, &g), (mi, vi)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        let g = g as f64;
        *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * g;
        *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p = (*p as f64 - hp.lr * m_hat / (v_hat.sqrt() + hp.eps)) as f32;
    }
    Ok(())
}

/// First/second moment state for every trainable tensor.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one optimizer step across all parameters.
    pub fn apply(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        hp: &AdamParams,
    ) -> Result<(), TrainError> {
        self.step += 1;
        for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            adam_step(param, grad, &mut self.m[idx], &mut self.v[idx], self.step, hp)?;
        }
        Ok(())
    }
}

// ── Cost construction ────────────────────────────────────────────────

/// The two cost terms of one minibatch, summed over draws.
#[derive(Debug, Clone, Copy)]
pub struct CostParts {
    /// Sum over draws of the likelihood term (mean NLL).
    pub nll_sum: f64,
    /// Sum over draws of the unweighted KL term.
    pub kl_sum: f64,
    /// Sum over draws of `lambda_i * kl`.
    pub weighted_kl_sum: f64,
    /// Total cost node value.
    pub cost: f64,
}

/// Build the minibatch cost on the tape:
/// `sum_k [ lambda_i * kl_k + nll_k ]` over `n` draws.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_cost(
    net: &mut Network,
    tape: &mut Tape,
    leaves: &NetLeaves,
    batch: NodeId,
    labels: &[u8],
    lambda_i: f64,
    n_draws: usize,
    mode: SampleMode,
    mut noise_for_draw: impl FnMut(usize) -> NoiseDraw,
) -> Result<(NodeId, CostParts), TrainError> {
    if n_draws == 0 {
        return Err(TrainError::BadConfig("at least one draw required".into()));
    }
    let mut cost = tape.zero_scalar();
    let mut parts = CostParts { nll_sum: 0.0, kl_sum: 0.0, weighted_kl_sum: 0.0, cost: 0.0 };
    for k in 0..n_draws {
        let mut noise = noise_for_draw(k);
        let (logits, kl) = net.forward_on_tape(tape, leaves, batch, mode, &mut noise)?;
        let nll = tape.softmax_nll(logits, labels.to_vec())?;
        let weighted_kl = tape.scale(kl, lambda_i);
        let draw_cost = tape.add(weighted_kl, nll)?;
        cost = tape.add(cost, draw_cost)?;

        parts.kl_sum += tape.value(kl).item() as f64;
        parts.weighted_kl_sum += tape.value(weighted_kl).item() as f64;
        parts.nll_sum += tape.value(nll).item() as f64;
    }
    parts.cost = tape.value(cost).item() as f64;
    Ok((cost, parts))
}

// ── Training loop ────────────────────────────────────────────────────

/// Log record for one epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Likelihood term, averaged over minibatches and draws.
    pub mean_nll: f64,
    /// Weighted prior term, averaged over minibatches and draws.
    pub mean_weighted_kl: f64,
    pub val_f1: f64,
    pub val_metrics: MetricsReport,
    pub best_so_far: bool,
}

/// Training result: the best network by validation F1 plus the log.
pub struct TrainOutcome {
    pub best: Network,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub reports: Vec<EpochReport>,
}

/// Stack segments into a `[B, 1, L]` tensor plus a label vector.
fn batch_tensor(
    segments: &[Segment],
    indices: &[usize],
    input_len: usize,
) -> Result<(Tensor, Vec<u8>), TrainError> {
    let mut data = Vec::with_capacity(indices.len() * input_len);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let seg = &segments[idx];
        if seg.samples.len() != input_len {
            return Err(TrainError::Shape(ShapeError::new(
                "batch",
                format!("segment {} has {} samples, expected {}", idx, seg.samples.len(), input_len),
            )));
        }
        data.extend_from_slice(&seg.samples);
        labels.push(seg.label.ok_or(TrainError::UnlabeledSegment(idx))?);
    }
    let batch = Tensor::from_vec(vec![indices.len(), 1, input_len], data)?;
    Ok((batch, labels))
}

/// Deterministic mean-only validation pass: argmax labels and AF
/// probabilities, evaluated in bounded chunks.
pub fn evaluate_mean_only(
    net: &Network,
    segments: &[Segment],
) -> Result<MetricsReport, TrainError> {
    if segments.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let input_len = net.config().input_len;
    let mut predicted = Vec::with_capacity(segments.len());
    let mut scores = Vec::with_capacity(segments.len());
    let mut labels = Vec::with_capacity(segments.len());
    for chunk in (0..segments.len()).collect::<Vec<_>>().chunks(256) {
        let (batch, chunk_labels) = batch_tensor(segments, chunk, input_len)?;
        let (logits, _) =
            net.forward_eval(&batch, SampleMode::MeanOnly, &mut NoiseDraw::zero())?;
        for (row, y) in ops::softmax_rows_f64(&logits).iter().zip(chunk_labels) {
            predicted.push(u8::from(row[1] > row[0]));
            scores.push(row[1]);
            labels.push(y);
        }
    }
    let counts = metrics::compute_counts(&predicted, &labels)?;
    Ok(metrics::compute_metrics(counts, &scores, &labels)?)
}

fn check_disjoint(train: &[Segment], val: &[Segment]) -> Result<(), TrainError> {
    let train_subjects: std::collections::BTreeSet<&str> =
        train.iter().map(|s| s.subject_id.as_str()).collect();
    for seg in val {
        if train_subjects.contains(seg.subject_id.as_str()) {
            return Err(TrainError::SubjectOverlap(seg.subject_id.clone()));
        }
    }
    Ok(())
}

/// Run the full training loop. Minibatch order reshuffles every epoch
/// from the config seed; `lambda_i` follows the post-shuffle position.
/// Returns the checkpoint with the highest validation F1 (ties keep the
/// earlier epoch).
pub fn train(
    net: &mut Network,
    train_set: &[Segment],
    val_set: &[Segment],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(net, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a per-epoch callback, for live progress reporting.
pub fn train_with_progress(
    net: &mut Network,
    train_set: &[Segment],
    val_set: &[Segment],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    check_disjoint(train_set, val_set)?;
    if train_set.len() % cfg.batch_size == 1 {
        return Err(TrainError::SingletonMinibatch {
            batch_size: cfg.batch_size,
            set_size: train_set.len(),
        });
    }

    let input_len = net.config().input_len;
    let sizes: Vec<usize> = net.trainable_params().iter().map(|p| p.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let hp = AdamParams { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps_opt };

    let mut best: Option<(Network, usize, f64)> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive2(cfg.seed, 0x7368_7566, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let minibatches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let m = minibatches.len();
        let mut nll_sum = 0.0f64;
        let mut weighted_kl_sum = 0.0f64;

        for (mb_idx, indices) in minibatches.iter().enumerate() {
            let lambda_i = lambda_schedule(mb_idx + 1, m, cfg.kl_scale)?;
            let (batch, labels) = batch_tensor(train_set, indices, input_len)?;

            let mut tape = Tape::new();
            let leaves = net.register_on_tape(&mut tape);
            let batch_node = tape.constant(batch);
            let noise_seed =
                seeds::derive2(cfg.seed, 0x6d62_6e73, ((epoch as u64) << 32) | mb_idx as u64);
            let (cost, parts) = minibatch_cost(
                net,
                &mut tape,
                &leaves,
                batch_node,
                &labels,
                lambda_i,
                cfg.mc_draws,
                cfg.mode,
                |k| NoiseDraw::gaussian(noise_seed, k as u64),
            )?;
            if !parts.cost.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, minibatch: mb_idx });
            }
            nll_sum += parts.nll_sum;
            weighted_kl_sum += parts.weighted_kl_sum;

            let grads = tape.backward(cost)?;
            let grad_tensors: Vec<Tensor> =
                leaves.ordered.iter().map(|&id| grads.get_or_zeros(id)).collect();
            let mut params = net.trainable_params_mut();
            adam.apply(&mut params, &grad_tensors, &hp)?;
        }

        let val_metrics = evaluate_mean_only(net, val_set)?;
        let val_f1 = val_metrics.f1;
        let is_best = best.as_ref().is_none_or(|(_, _, f1)| val_f1 > *f1);
        if is_best {
            best = Some((net.clone(), epoch, val_f1));
        }
        let draws_per_epoch = (m * cfg.mc_draws) as f64;
        let report = EpochReport {
            epoch,
            mean_nll: nll_sum / draws_per_epoch,
            mean_weighted_kl: weighted_kl_sum / draws_per_epoch,
            val_f1,
            val_metrics,
            best_so_far: is_best,
        };
        on_epoch(&report);
        reports.push(report);
    }

    let (best_net, best_epoch, best_f1) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best: best_net, best_epoch, best_f1, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkConfig, StageSpec};

    fn tiny_net(seed: u64) -> Network {
        let cfg = NetworkConfig {
            input_len: 32,
            stages: vec![
                StageSpec { channels: 4, kernel: 3, pool: Some(2), batchnorm: false },
                StageSpec { channels: 4, kernel: 3, pool: None, batchnorm: true },
            ],
            dense_width: 4,
            variational_bias: true,
            enforce_architecture: false,
        };
        Network::build(cfg, seed).unwrap()
    }

    fn toy_segments(n: usize, subject: &str, label: u8, seed: u64) -> Vec<Segment> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let freq = if label == 1 { 0.9 } else { 0.3 };
                let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                Segment {
                    samples: (0..32)
                        .map(|i| (i as f32 * freq + phase).sin() * 0.4 + 0.5)
                        .collect(),
                    subject_id: subject.to_string(),
                    label: Some(label),
                    noise_level: Some(0.0),
                }
            })
            .collect()
    }

    #[test]
    fn lambda_single_minibatch_is_one() {
        assert!((lambda_schedule(1, 1, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_first_of_ten_at_scale() {
        let l = lambda_schedule(1, 10, 1e-5).unwrap();
        let expected = 512.0 / 1023.0 * 1e-5;
        assert!((l - expected).abs() < 1e-12, "{} vs {}", l, expected);
    }

    #[test]
    fn lambda_sums_to_one() {
        for m in 1..=20 {
            let total: f64 = (1..=m).map(|i| lambda_schedule(i, m, 1.0).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-9, "M={} sum={}", m, total);
        }
        // Large M must not overflow.
        let l = lambda_schedule(1, 100, 1.0).unwrap();
        assert!((l - 0.5).abs() < 1e-9);
    }

    #[test]
    fn lambda_rejects_out_of_range() {
        assert!(lambda_schedule(0, 5, 1.0).is_err());
        assert!(lambda_schedule(6, 5, 1.0).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Tensor::from_slice(&[1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        let hp = AdamParams { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_step(&mut p, &g, &mut m, &mut v, 1, &hp).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = Tensor::from_slice(&[1.0, 1.0]);
        let g = Tensor::from_slice(&[0.3, -7.0]);
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        let hp = AdamParams { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_step(&mut p, &g, &mut m, &mut v, 1, &hp).unwrap();
        // Bias correction makes m_hat / sqrt(v_hat) = sign(g).
        assert!((p.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p.data()[1] - (1.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut p = Tensor::from_slice(&[1.0]);
        let g = Tensor::from_slice(&[1.0, 2.0]);
        let mut m = vec![0.0; 1];
        let mut v = vec![0.0; 1];
        let hp = AdamParams { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        assert!(adam_step(&mut p, &g, &mut m, &mut v, 1, &hp).is_err());
    }

    #[test]
    fn adam_trajectory_matches_f64_reference() {
        // f(x) = x^2 from x = 1: grad = 2x.
        let hp = AdamParams { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = Tensor::from_slice(&[1.0]);
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for step in 1..=10u64 {
            let g = Tensor::from_slice(&[2.0 * p.data()[0]]);
            adam_step(&mut p, &g, &mut m, &mut v, step, &hp).unwrap();
        }

        // Independent 64-bit reference of the published update rule,
        // rounding the parameter to f32 after each step like storage does.
        let mut x = 1.0f64;
        let (mut rm, mut rv) = (0.0f64, 0.0f64);
        for step in 1..=10 {
            let g = 2.0 * x;
            rm = hp.beta1 * rm + (1.0 - hp.beta1) * g;
            rv = hp.beta2 * rv + (1.0 - hp.beta2) * g * g;
            let m_hat = rm / (1.0 - hp.beta1.powi(step));
            let v_hat = rv / (1.0 - hp.beta2.powi(step));
            x -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            x = x as f32 as f64;
        }
        assert!(
            (p.data()[0] as f64 - x).abs() < 1e-6,
            "trajectory {} vs reference {}",
            p.data()[0],
            x
        );
    }

    #[test]
    fn cost_with_zero_lambda_is_plain_nll() {
        let mut net = tiny_net(3);
        let segs = toy_segments(4, "A", 1, 5);
        let (batch, labels) = batch_tensor(&segs, &[0, 1, 2, 3], 32).unwrap();

        let mut tape = Tape::new();
        let leaves = net.register_on_tape(&mut tape);
        let batch_node = tape.constant(batch.clone());
        let (_, parts) = minibatch_cost(
            &mut net,
            &mut tape,
            &leaves,
            batch_node,
            &labels,
            0.0,
            1,
            SampleMode::WeightSample,
            |_| NoiseDraw::gaussian(11, 0),
        )
        .unwrap();
        assert!((parts.cost - parts.nll_sum).abs() < 1e-6);
        assert_eq!(parts.weighted_kl_sum, 0.0);
    }

    #[test]
    fn two_identical_draws_double_the_cost() {
        let mut net = tiny_net(4);
        let segs = toy_segments(4, "A", 0, 6);
        let (batch, labels) = batch_tensor(&segs, &[0, 1, 2, 3], 32).unwrap();

        let run = |net: &mut Network, draws: usize| -> f64 {
            let mut tape = Tape::new();
            let leaves = net.register_on_tape(&mut tape);
            let batch_node = tape.constant(batch.clone());
            let (_, parts) = minibatch_cost(
                net,
                &mut tape,
                &leaves,
                batch_node,
                &labels,
                1e-5,
                draws,
                SampleMode::WeightSample,
                |_| NoiseDraw::gaussian(21, 0), // frozen: same noise every draw
            )
            .unwrap();
            parts.cost
        };
        let c1 = run(&mut net, 1);
        let c2 = run(&mut net, 2);
        assert!((c2 - 2.0 * c1).abs() < 2e-5 * c1.abs().max(1.0), "c1={} c2={}", c1, c2);
    }

    #[test]
    fn cost_parts_match_independent_recomposition() {
        let mut net = tiny_net(8);
        let segs = toy_segments(4, "A", 1, 9);
        let (batch, labels) = batch_tensor(&segs, &[0, 1, 2, 3], 32).unwrap();
        let lambda = 3e-4;

        let mut tape = Tape::new();
        let leaves = net.register_on_tape(&mut tape);
        let batch_node = tape.constant(batch.clone());
        let (_, parts) = minibatch_cost(
            &mut net,
            &mut tape,
            &leaves,
            batch_node,
            &labels,
            lambda,
            1,
            SampleMode::WeightSample,
            |_| NoiseDraw::gaussian(31, 0),
        )
        .unwrap();

        // Recompute both terms from the untaped forward with the same
        // noise stream and the loss kernel directly.
        let (logits, kl) = {
            // Same weights: eval-phase batchnorm does not apply here
            // (tiny net stage 2 has bn) so replicate via taped values:
            // recompute nll from the taped logits instead.
            let mut tape2 = Tape::new();
            let leaves2 = net.register_on_tape(&mut tape2);
            let batch_node2 = tape2.constant(batch.clone());
            let mut noise = NoiseDraw::gaussian(31, 0);
            let (logits_id, kl_id) = net
                .forward_on_tape(&mut tape2, &leaves2, batch_node2, SampleMode::WeightSample, &mut noise)
                .unwrap();
            (tape2.value(logits_id).clone(), tape2.value(kl_id).item() as f64)
        };
        let (nll, _) = ops::softmax_nll(&logits, &labels).unwrap();
        let expected = lambda * kl + nll.item() as f64;
        assert!(
            (parts.cost - expected).abs() < 1e-5 * expected.abs().max(1.0),
            "cost {} vs recomposed {}",
            parts.cost,
            expected
        );
        assert!((parts.kl_sum - kl).abs() < 1e-4 * kl.abs().max(1.0));
    }

    #[test]
    fn one_step_changes_parameters() {
        let mut net = tiny_net(12);
        let train_set: Vec<Segment> = toy_segments(6, "A", 0, 1)
            .into_iter()
            .chain(toy_segments(6, "B", 1, 2))
            .collect();
        let val: Vec<Segment> = toy_segments(3, "C", 0, 3)
            .into_iter()
            .chain(toy_segments(3, "D", 1, 4))
            .collect();
        let before: Vec<Vec<f32>> =
            net.trainable_params().iter().map(|p| p.data().to_vec()).collect();
        let cfg = TrainConfig {
            batch_size: 12,
            epochs: 1,
            mode: SampleMode::WeightSample,
            ..TrainConfig::default()
        };
        train(&mut net, &train_set, &val, &cfg).unwrap();
        let after: Vec<Vec<f32>> =
            net.trainable_params().iter().map(|p| p.data().to_vec()).collect();
        assert!(before.iter().zip(&after).any(|(b, a)| b != a), "no parameter moved");
    }

    #[test]
    fn same_seed_reproduces_reports() {
        let train_set: Vec<Segment> = toy_segments(6, "A", 0, 1)
            .into_iter()
            .chain(toy_segments(6, "B", 1, 2))
            .collect();
        let val: Vec<Segment> = toy_segments(3, "C", 0, 3)
            .into_iter()
            .chain(toy_segments(3, "D", 1, 4))
            .collect();
        let cfg = TrainConfig { batch_size: 6, epochs: 2, ..TrainConfig::default() };
        let run = || {
            let mut net = tiny_net(12);
            let outcome = train(&mut net, &train_set, &val, &cfg).unwrap();
            (
                outcome.best_epoch,
                outcome
                    .reports
                    .iter()
                    .map(|r| (r.mean_nll, r.mean_weighted_kl, r.val_f1))
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn subject_overlap_refused() {
        let mut net = tiny_net(1);
        let train_set = toy_segments(4, "A", 0, 1);
        let val = toy_segments(2, "A", 1, 2);
        let cfg = TrainConfig { batch_size: 4, epochs: 1, ..TrainConfig::default() };
        assert!(matches!(
            train(&mut net, &train_set, &val, &cfg),
            Err(TrainError::SubjectOverlap(_))
        ));
    }

    #[test]
    fn empty_sets_refused() {
        let mut net = tiny_net(1);
        let segs = toy_segments(4, "A", 0, 1);
        let cfg = TrainConfig { batch_size: 4, epochs: 1, ..TrainConfig::default() };
        assert!(matches!(train(&mut net, &[], &segs, &cfg), Err(TrainError::EmptySet("train"))));
        assert!(matches!(
            train(&mut net, &segs, &[], &cfg),
            Err(TrainError::EmptySet("validation"))
        ));
    }

    #[test]
    fn singleton_final_minibatch_refused() {
        let mut net = tiny_net(1);
        let train_set: Vec<Segment> = toy_segments(5, "A", 0, 1)
            .into_iter()
            .chain(toy_segments(4, "B", 1, 2))
            .collect();
        let val = toy_segments(2, "C", 1, 3);
        let cfg = TrainConfig { batch_size: 4, epochs: 1, ..TrainConfig::default() };
        assert!(matches!(
            train(&mut net, &train_set, &val, &cfg),
            Err(TrainError::SingletonMinibatch { .. })
        ));
    }
}
