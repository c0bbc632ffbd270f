//! Network assembly: a stack of Bayesian conv stages (early stages pooled,
//! late stages batch-normalized), global average pooling over time, and two
//! variational dense layers ending in two class logits.
//!
//! Stage order is conv -> (batchnorm) -> softplus -> (maxpool).

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bayes::{BayesConv1d, BayesDense, NoiseDraw, SampleMode, VariationalLeaves};
use crate::ops;
use crate::seeds;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ShapeError, Tensor};

/// Batchnorm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batchnorm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Parameter budget for the standard architecture, counting posterior
/// means plus deterministic parameters: 180K +/- 10%.
pub const PARAM_BUDGET: (usize, usize) = (162_000, 198_000);

/// Expected input length: 25 s at 32 Hz.
pub const INPUT_LEN: usize = 800;

#[derive(Debug)]
pub enum NetworkError {
    Config(String),
    Shape(ShapeError),
}

impl fmt::Display for NetworkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkError::Config(msg) => write!(f, "invalid network config: {}", msg),
            NetworkError::Shape(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for NetworkError {}

impl From<ShapeError> for NetworkError {
    fn from(e: ShapeError) -> Self {
        NetworkError::Shape(e)
    }
}

/// One convolutional stage of the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    /// Maxpool window (stride equals window) applied after the activation.
    pub pool: Option<usize>,
    pub batchnorm: bool,
}

/// Architecture description. The standard plan satisfies the full
/// contract (nine stages, pooling on the first three, batchnorm on the
/// final six, parameter budget); relaxed configs cover desk-scale smoke
/// models and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_len: usize,
    pub stages: Vec<StageSpec>,
    pub dense_width: usize,
    pub variational_bias: bool,
    /// When set, `Network::build` enforces the standard architecture
    /// contract in addition to basic shape feasibility.
    pub enforce_architecture: bool,
}

impl NetworkConfig {
    /// The default plan. Widths are tuned so the parameter count lands
    /// near 180K within the enforced budget.
    pub fn standard() -> Self {
        let widths = [16usize, 32, 48, 64, 64, 80, 80, 84, 84];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &channels)| StageSpec {
                channels,
                kernel: if i < 3 { 7 } else { 5 },
                pool: (i < 3).then_some(2),
                batchnorm: i >= 3,
            })
            .collect();
        NetworkConfig {
            input_len: INPUT_LEN,
            stages,
            dense_width: 64,
            variational_bias: true,
            enforce_architecture: true,
        }
    }

    /// Total parameter count: posterior means of every variational tensor
    /// plus batchnorm scale/shift.
    pub fn param_count(&self) -> usize {
        let mut total = 0usize;
        let mut c_in = 1usize;
        for stage in &self.stages {
            total += stage.channels * c_in * stage.kernel + stage.channels;
            if stage.batchnorm {
                total += 2 * stage.channels;
            }
            c_in = stage.channels;
        }
        total += self.dense_width * c_in + self.dense_width;
        total += 2 * self.dense_width + 2;
        total
    }

    /// Validate feasibility; additionally validate the architecture
    /// contract when `enforce_architecture` is set.
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.stages.is_empty() {
            return Err(NetworkError::Config("at least one conv stage required".into()));
        }
        if self.dense_width == 0 {
            return Err(NetworkError::Config("dense_width must be positive".into()));
        }
        let mut len = self.input_len;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.channels == 0 {
                return Err(NetworkError::Config(format!("stage {}: zero channels", i)));
            }
            if stage.kernel == 0 || stage.kernel % 2 == 0 {
                return Err(NetworkError::Config(format!(
                    "stage {}: kernel must be odd and positive, got {}",
                    i, stage.kernel
                )));
            }
            // Same-length padding keeps len unchanged through the conv.
            if let Some(w) = stage.pool {
                if w == 0 || w > len {
                    return Err(NetworkError::Config(format!(
                        "stage {}: pool window {} invalid for length {}",
                        i, w, len
                    )));
                }
                len = (len - w) / w + 1;
            }
            if len == 0 {
                return Err(NetworkError::Config(format!("stage {}: length collapsed to 0", i)));
            }
        }
        if self.enforce_architecture {
            if self.stages.len() != 9 {
                return Err(NetworkError::Config(format!(
                    "architecture contract requires exactly 9 conv stages, got {}",
                    self.stages.len()
                )));
            }
            if self.input_len != INPUT_LEN {
                return Err(NetworkError::Config(format!(
                    "architecture contract requires input length {}, got {}",
                    INPUT_LEN, self.input_len
                )));
            }
            for (i, stage) in self.stages.iter().enumerate() {
                if i < 3 {
                    if stage.pool.is_none() {
                        return Err(NetworkError::Config(format!(
                            "stage {} must have maxpool (first three stages downsample)",
                            i
                        )));
                    }
                    if stage.batchnorm {
                        return Err(NetworkError::Config(format!(
                            "stage {} must not have batchnorm (only the final six stages do)",
                            i
                        )));
                    }
                } else {
                    if stage.pool.is_some() {
                        return Err(NetworkError::Config(format!(
                            "stage {} must not pool (only the first three stages downsample)",
                            i
                        )));
                    }
                    if !stage.batchnorm {
                        return Err(NetworkError::Config(format!(
                            "stage {} must have batchnorm (final six stages)",
                            i
                        )));
                    }
                }
            }
            let count = self.param_count();
            if count < PARAM_BUDGET.0 || count > PARAM_BUDGET.1 {
                return Err(NetworkError::Config(format!(
                    "parameter count {} outside budget [{}, {}]",
                    count, PARAM_BUDGET.0, PARAM_BUDGET.1
                )));
            }
        }
        Ok(())
    }

    /// Canonical flat text encoding, embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("input_len = {}\n", self.input_len));
        for s in &self.stages {
            out.push_str(&format!(
                "stage = {},{},{},{}\n",
                s.channels,
                s.kernel,
                s.pool.map(|w| w.to_string()).unwrap_or_else(|| "none".into()),
                if s.batchnorm { "bn" } else { "nobn" },
            ));
        }
        out.push_str(&format!("dense_width = {}\n", self.dense_width));
        out.push_str(&format!("variational_bias = {}\n", self.variational_bias));
        out.push_str(&format!("enforce_architecture = {}\n", self.enforce_architecture));
        out
    }

    /// Parse the canonical text encoding.
    pub fn from_text(text: &str) -> Result<Self, NetworkError> {
        let mut cfg = NetworkConfig {
            input_len: 0,
            stages: Vec::new(),
            dense_width: 0,
            variational_bias: true,
            enforce_architecture: true,
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NetworkError::Config(format!("malformed line: {}", line)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| NetworkError::Config(format!("bad {}: {}", what, value));
            match key {
                "input_len" => cfg.input_len = value.parse().map_err(|_| bad("input_len"))?,
                "dense_width" => cfg.dense_width = value.parse().map_err(|_| bad("dense_width"))?,
                "variational_bias" => {
                    cfg.variational_bias = value.parse().map_err(|_| bad("variational_bias"))?
                }
                "enforce_architecture" => {
                    cfg.enforce_architecture =
                        value.parse().map_err(|_| bad("enforce_architecture"))?
                }
                "stage" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 4 {
                        return Err(bad("stage"));
                    }
                    cfg.stages.push(StageSpec {
                        channels: parts[0].parse().map_err(|_| bad("stage channels"))?,
                        kernel: parts[1].parse().map_err(|_| bad("stage kernel"))?,
                        pool: match parts[2] {
                            "none" => None,
                            w => Some(w.parse().map_err(|_| bad("stage pool"))?),
                        },
                        batchnorm: match parts[3] {
                            "bn" => true,
                            "nobn" => false,
                            _ => return Err(bad("stage batchnorm flag")),
                        },
                    });
                }
                other => {
                    return Err(NetworkError::Config(format!("unknown config key: {}", other)))
                }
            }
        }
        Ok(cfg)
    }
}

/// Deterministic batch normalization layer (point parameters, not
/// variational: it acts as a stabilizer, and batch statistics have no
/// posterior in the training scheme used here).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn update_running(&mut self, stats: &ops::BnStats) {
        for (r, &m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * m) as f32;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * v) as f32;
        }
    }
}

/// Tape leaf ids for every trainable tensor, in canonical order.
pub struct NetLeaves {
    conv: Vec<VariationalLeaves>,
    bn: Vec<Option<(NodeId, NodeId)>>,
    fc1: VariationalLeaves,
    fc2: VariationalLeaves,
    /// Leaf ids in the order of [`Network::trainable_names`].
    pub ordered: Vec<NodeId>,
}

/// The assembled model.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    pub conv: Vec<BayesConv1d>,
    pub bn: Vec<Option<BatchNorm>>,
    pub fc1: BayesDense,
    pub fc2: BayesDense,
    seed: u64,
}

impl Network {
    /// Build and deterministically initialize a network from its config.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x696e_6974));
        let mut conv = Vec::with_capacity(config.stages.len());
        let mut bn = Vec::with_capacity(config.stages.len());
        let mut c_in = 1usize;
        for stage in &config.stages {
            conv.push(BayesConv1d::init(
                c_in,
                stage.channels,
                stage.kernel,
                1,
                stage.kernel / 2,
                config.variational_bias,
                &mut rng,
            ));
            bn.push(stage.batchnorm.then(|| BatchNorm::new(stage.channels)));
            c_in = stage.channels;
        }
        let fc1 = BayesDense::init(c_in, config.dense_width, config.variational_bias, &mut rng);
        let fc2 = BayesDense::init(config.dense_width, 2, config.variational_bias, &mut rng);
        Ok(Network { config, conv, bn, fc1, fc2, seed })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), NetworkError> {
        if batch.rank() != 3 || batch.shape()[1] != 1 {
            return Err(NetworkError::Config(format!(
                "input must be [B, 1, {}], got {:?}",
                self.config.input_len,
                batch.shape()
            )));
        }
        if batch.shape()[2] != self.config.input_len {
            return Err(NetworkError::Config(format!(
                "input length {} does not match configured {}",
                batch.shape()[2],
                self.config.input_len
            )));
        }
        Ok(())
    }

    /// Untaped forward in eval phase (batchnorm running statistics).
    /// Returns logits `[B, 2]` and the KL term for this draw: Monte Carlo
    /// terms for sampled weights, closed form under local
    /// reparameterization, zero in mean-only mode.
    pub fn forward_eval(
        &self,
        batch: &Tensor,
        mode: SampleMode,
        noise: &mut NoiseDraw,
    ) -> Result<(Tensor, f64), NetworkError> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut kl = 0.0f64;
        for (stage, conv) in self.conv.iter().enumerate() {
            let (y, layer_kl) = conv.forward(&x, mode, noise)?;
            kl += layer_kl;
            let y = match &self.bn[stage] {
                Some(bn) => ops::batchnorm1d_eval(
                    &y,
                    &bn.gamma,
                    &bn.beta,
                    &bn.running_mean,
                    &bn.running_var,
                    BN_EPS,
                )?,
                None => y,
            };
            let y = ops::softplus(&y);
            x = match self.config.stages[stage].pool {
                Some(w) => ops::maxpool1d(&y, w, w)?.0,
                None => y,
            };
        }
        let pooled = ops::global_avg_pool(&x)?;
        let (h, kl1) = self.fc1.forward(&pooled, mode, noise)?;
        kl += kl1;
        let h = ops::softplus(&h);
        let (logits, kl2) = self.fc2.forward(&h, mode, noise)?;
        kl += kl2;
        Ok((logits, kl))
    }

    /// Mean-only forward truncated before the final classifier: the
    /// softplus activations of the first dense layer.
    pub fn penultimate_features(&self, batch: &Tensor) -> Result<Tensor, NetworkError> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut noise = NoiseDraw::zero();
        for (stage, conv) in self.conv.iter().enumerate() {
            let (y, _) = conv.forward(&x, SampleMode::MeanOnly, &mut noise)?;
            let y = match &self.bn[stage] {
                Some(bn) => ops::batchnorm1d_eval(
                    &y,
                    &bn.gamma,
                    &bn.beta,
                    &bn.running_mean,
                    &bn.running_var,
                    BN_EPS,
                )?,
                None => y,
            };
            let y = ops::softplus(&y);
            x = match self.config.stages[stage].pool {
                Some(w) => ops::maxpool1d(&y, w, w)?.0,
                None => y,
            };
        }
        let pooled = ops::global_avg_pool(&x)?;
        let (h, _) = self.fc1.forward(&pooled, SampleMode::MeanOnly, &mut noise)?;
        Ok(ops::softplus(&h))
    }

    /// Register every trainable tensor on the tape.
    pub fn register_on_tape(&self, tape: &mut Tape) -> NetLeaves {
        let mut ordered = Vec::new();
        let mut conv_leaves = Vec::with_capacity(self.conv.len());
        let mut bn_leaves = Vec::with_capacity(self.bn.len());
        for (conv, bn) in self.conv.iter().zip(&self.bn) {
            let leaves = conv.register(tape);
            push_variational(&mut ordered, &leaves);
            conv_leaves.push(leaves);
            bn_leaves.push(bn.as_ref().map(|b| {
                let gamma = tape.param(b.gamma.clone());
                let beta = tape.param(b.beta.clone());
                ordered.push(gamma);
                ordered.push(beta);
                (gamma, beta)
            }));
        }
        let fc1 = self.fc1.register(tape);
        push_variational(&mut ordered, &fc1);
        let fc2 = self.fc2.register(tape);
        push_variational(&mut ordered, &fc2);
        NetLeaves { conv: conv_leaves, bn: bn_leaves, fc1, fc2, ordered }
    }

    /// Taped train-phase forward: batch statistics for normalization
    /// (running estimates updated as a side effect), stochastic weights
    /// per `mode`. Returns `(logits, kl)` node ids.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        leaves: &NetLeaves,
        batch: NodeId,
        mode: SampleMode,
        noise: &mut NoiseDraw,
    ) -> Result<(NodeId, NodeId), NetworkError> {
        self.check_input(tape.value(batch))?;
        let mut x = batch;
        let mut kl = tape.zero_scalar();
        for stage in 0..self.conv.len() {
            let (y, layer_kl) =
                self.conv[stage].forward_on_tape(tape, &leaves.conv[stage], x, mode, noise)?;
            kl = tape.add(kl, layer_kl)?;
            let y = match (&mut self.bn[stage], &leaves.bn[stage]) {
                (Some(bn), Some((gamma, beta))) => {
                    let (y, stats) = tape.batchnorm1d_train(y, *gamma, *beta, BN_EPS)?;
                    bn.update_running(&stats);
                    y
                }
                _ => y,
            };
            let y = tape.softplus(y);
            x = match self.config.stages[stage].pool {
                Some(w) => tape.maxpool1d(y, w, w)?,
                None => y,
            };
        }
        let pooled = tape.global_avg_pool(x)?;
        let (h, kl1) = self.fc1.forward_on_tape(tape, &leaves.fc1, pooled, mode, noise)?;
        kl = tape.add(kl, kl1)?;
        let h = tape.softplus(h);
        let (logits, kl2) = self.fc2.forward_on_tape(tape, &leaves.fc2, h, mode, noise)?;
        kl = tape.add(kl, kl2)?;
        Ok((logits, kl))
    }

    /// Names of trainable tensors, in the order used by
    /// [`Network::trainable_params`] and [`NetLeaves::ordered`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.conv.iter().enumerate() {
            names.push(format!("conv{}.kernel.mu", i));
            names.push(format!("conv{}.kernel.rho", i));
            names.push(format!("conv{}.bias.mu", i));
            if self.config.variational_bias {
                names.push(format!("conv{}.bias.rho", i));
            }
            if self.bn[i].is_some() {
                names.push(format!("bn{}.gamma", i));
                names.push(format!("bn{}.beta", i));
            }
        }
        for fc in ["fc1", "fc2"] {
            names.push(format!("{}.weight.mu", fc));
            names.push(format!("{}.weight.rho", fc));
            names.push(format!("{}.bias.mu", fc));
            if self.config.variational_bias {
                names.push(format!("{}.bias.rho", fc));
            }
        }
        names
    }

    /// Immutable views of the trainable tensors, canonical order.
    pub fn trainable_params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (conv, bn) in self.conv.iter().zip(&self.bn) {
            out.push(&conv.kernel.mu);
            out.push(&conv.kernel.rho);
            out.push(&conv.bias.mu);
            if self.config.variational_bias {
                out.push(&conv.bias.rho);
            }
            if let Some(b) = bn {
                out.push(&b.gamma);
                out.push(&b.beta);
            }
        }
        for fc in [&self.fc1, &self.fc2] {
            out.push(&fc.weight.mu);
            out.push(&fc.weight.rho);
            out.push(&fc.bias.mu);
            if self.config.variational_bias {
                out.push(&fc.bias.rho);
            }
        }
        out
    }

    /// Mutable views of the trainable tensors, canonical order.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let variational_bias = self.config.variational_bias;
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (conv, bn) in self.conv.iter_mut().zip(self.bn.iter_mut()) {
            let BayesConv1d { kernel, bias, .. } = conv;
            out.push(&mut kernel.mu);
            out.push(&mut kernel.rho);
            out.push(&mut bias.mu);
            if variational_bias {
                out.push(&mut bias.rho);
            }
            if let Some(b) = bn {
                out.push(&mut b.gamma);
                out.push(&mut b.beta);
            }
        }
        for fc in [&mut self.fc1, &mut self.fc2] {
            let BayesDense { weight, bias, .. } = fc;
            out.push(&mut weight.mu);
            out.push(&mut weight.rho);
            out.push(&mut bias.mu);
            if variational_bias {
                out.push(&mut bias.rho);
            }
        }
        out
    }
}

fn push_variational(ordered: &mut Vec<NodeId>, leaves: &VariationalLeaves) {
    ordered.push(leaves.mu);
    ordered.push(leaves.rho);
    ordered.push(leaves.bias_mu);
    if let Some(rho) = leaves.bias_rho {
        ordered.push(rho);
    }
}
