//! Variational layer primitives: factorized Gaussian posteriors over
//! weights, weight-space sampling, local reparameterization, and the KL
//! terms that regularize training.
//!
//! A posterior over one weight tensor is parameterized as `theta = (mu,
//! rho)` with `sigma = softplus(rho)`, so the scale is positive by
//! construction. Weight draws follow `w = mu + softplus(rho) * eps` with
//! `eps ~ N(0, I)`. The prior is fixed at `N(0, I)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ops;
use crate::seeds;
use crate::tape::{NodeId, Tape};
use crate::tensor::{expect_same_shape, ShapeError, Tensor};

/// Variance floor inside the local-reparameterization square root.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// How a stochastic layer realizes its forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Draw explicit weights `w = mu + sigma * eps`.
    WeightSample,
    /// Sample pre-activations from their induced Gaussian instead of
    /// sampling weights; lower gradient variance at equal expectation.
    LocalReparam,
    /// Deterministic pass through the posterior means.
    MeanOnly,
}

impl SampleMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weight-sample" => Some(SampleMode::WeightSample),
            "local-reparam" => Some(SampleMode::LocalReparam),
            "mean-only" => Some(SampleMode::MeanOnly),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMode::WeightSample => "weight-sample",
            SampleMode::LocalReparam => "local-reparam",
            SampleMode::MeanOnly => "mean-only",
        }
    }
}

/// The fixed weight prior: standard normal, independent per weight.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorSpec;

/// A reproducible stream of noise tensors for one Monte Carlo draw.
///
/// Layers consume samples in a fixed order, so a `(seed, index)` pair pins
/// every epsilon in the draw. The zero variant feeds `eps = 0` everywhere,
/// collapsing any stochastic mode onto the posterior mean.
pub struct NoiseDraw {
    rng: Option<ChaCha8Rng>,
    pub seed: u64,
    pub index: u64,
}

impl NoiseDraw {
    /// Standard-normal noise for draw `index` of stream `seed`.
    pub fn gaussian(seed: u64, index: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seeds::derive2(seed, 0x6e6f_6973, index));
        NoiseDraw { rng: Some(rng), seed, index }
    }

    /// All-zero noise.
    pub fn zero() -> Self {
        NoiseDraw { rng: None, seed: 0, index: 0 }
    }

    /// Next noise tensor of the given shape.
    pub fn sample(&mut self, shape: &[usize]) -> Tensor {
        match &mut self.rng {
            Some(rng) => {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::from_vec(shape.to_vec(), data).expect("noise shape")
            }
            None => Tensor::zeros(shape),
        }
    }
}

/// Paired `(mu, rho)` arrays defining a factorized Gaussian posterior
/// over one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalTensor {
    pub mu: Tensor,
    pub rho: Tensor,
}

/// Initial `rho`; `softplus(-5) ~ 6.7e-3` keeps early training
/// near-deterministic.
pub const INIT_RHO: f32 = -5.0;

impl VariationalTensor {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self, ShapeError> {
        expect_same_shape("variational_tensor", &mu, &rho)?;
        Ok(VariationalTensor { mu, rho })
    }

    /// Initialization: `mu ~ N(0, 1/fan_in)`, `rho = -5`.
    pub fn init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let mu_data: Vec<f32> =
            (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect();
        VariationalTensor {
            mu: Tensor::from_vec(shape.to_vec(), mu_data).expect("mu shape"),
            rho: Tensor::full(shape, INIT_RHO),
        }
    }

    /// Zero-mean posterior used as a placeholder before checkpoint load.
    pub fn placeholder(shape: &[usize]) -> Self {
        VariationalTensor { mu: Tensor::zeros(shape), rho: Tensor::full(shape, INIT_RHO) }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    /// Posterior scale `sigma = softplus(rho)`.
    pub fn sigma(&self) -> Tensor {
        ops::softplus(&self.rho)
    }

    /// Weight draw with explicit noise: `w = mu + softplus(rho) * eps`.
    pub fn sample_with(&self, eps: &Tensor) -> Result<Tensor, ShapeError> {
        expect_same_shape("sample_weights", &self.mu, eps)?;
        let data: Vec<f32> = self
            .mu
            .data()
            .iter()
            .zip(self.rho.data())
            .zip(eps.data())
            .map(|((&m, &r), &e)| m + ops::softplus_scalar(r) * e)
            .collect();
        Tensor::from_vec(self.mu.shape().to_vec(), data)
    }
}

/// Draw a weight tensor from the posterior using the next noise sample.
pub fn sample_weights(vt: &VariationalTensor, noise: &mut NoiseDraw) -> Tensor {
    let eps = noise.sample(vt.shape());
    vt.sample_with(&eps).expect("shapes match by construction")
}

/// Monte Carlo KL contribution of one draw:
/// `sum_j [ log N(w_j; mu_j, sigma_j^2) - log N(w_j; 0, 1) ]`.
///
/// The `0.5 ln(2 pi)` constants cancel between the two densities.
pub fn kl_mc_terms(vt: &VariationalTensor, w: &Tensor, _prior: PriorSpec) -> f64 {
    debug_assert_eq!(vt.shape(), w.shape());
    let mut acc = 0.0f64;
    for ((&m, &r), &wv) in vt.mu.data().iter().zip(vt.rho.data()).zip(w.data()) {
        let sigma = ops::softplus_scalar(r) as f64;
        let d = wv as f64 - m as f64;
        acc += -sigma.ln() - d * d / (2.0 * sigma * sigma) + (wv as f64) * (wv as f64) / 2.0;
    }
    acc
}

/// Closed-form Gaussian KL against the standard-normal prior:
/// `sum_j 0.5 (mu_j^2 + sigma_j^2 - 1 - ln sigma_j^2)`.
pub fn kl_closed_form(vt: &VariationalTensor, _prior: PriorSpec) -> f64 {
    let mut acc = 0.0f64;
    for (&m, &r) in vt.mu.data().iter().zip(vt.rho.data()) {
        let sigma = ops::softplus_scalar(r) as f64;
        acc += 0.5 * ((m as f64) * (m as f64) + sigma * sigma - 1.0) - sigma.ln();
    }
    acc
}

// ── Layers ───────────────────────────────────────────────────────────

/// Tape leaves for one variational weight pair (and optional bias pair).
#[derive(Debug, Clone)]
pub struct VariationalLeaves {
    pub mu: NodeId,
    pub rho: NodeId,
    pub bias_mu: NodeId,
    /// `None` when the bias is trained as a deterministic point.
    pub bias_rho: Option<NodeId>,
}

/// 1-D convolutional layer with a Gaussian posterior over its kernel
/// (and, by default, its bias).
#[derive(Debug, Clone)]
pub struct BayesConv1d {
    pub kernel: VariationalTensor,
    pub bias: VariationalTensor,
    pub variational_bias: bool,
    pub stride: usize,
    pub padding: usize,
}

impl BayesConv1d {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        variational_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kernel = VariationalTensor::init(&[c_out, c_in, k], c_in * k, rng);
        let bias = VariationalTensor {
            mu: Tensor::zeros(&[c_out]),
            rho: Tensor::full(&[c_out], INIT_RHO),
        };
        BayesConv1d { kernel, bias, variational_bias, stride, padding }
    }

    /// Untaped forward. Returns the activation input and this layer's KL
    /// contribution for the draw (zero in mean-only mode).
    pub fn forward(
        &self,
        input: &Tensor,
        mode: SampleMode,
        noise: &mut NoiseDraw,
    ) -> Result<(Tensor, f64), ShapeError> {
        match mode {
            SampleMode::MeanOnly => {
                let out =
                    ops::conv1d(input, &self.kernel.mu, Some(&self.bias.mu), self.stride, self.padding)?;
                Ok((out, 0.0))
            }
            SampleMode::WeightSample => {
                let w = sample_weights(&self.kernel, noise);
                let mut kl = kl_mc_terms(&self.kernel, &w, PriorSpec);
                let b = if self.variational_bias {
                    let b = sample_weights(&self.bias, noise);
                    kl += kl_mc_terms(&self.bias, &b, PriorSpec);
                    b
                } else {
                    self.bias.mu.clone()
                };
                let out = ops::conv1d(input, &w, Some(&b), self.stride, self.padding)?;
                Ok((out, kl))
            }
            SampleMode::LocalReparam => {
                let mean =
                    ops::conv1d(input, &self.kernel.mu, Some(&self.bias.mu), self.stride, self.padding)?;
                let sigma = self.kernel.sigma();
                let sigma_sq = square(&sigma);
                let x_sq = square(input);
                let bias_var = self.variational_bias.then(|| square(&self.bias.sigma()));
                let var =
                    ops::conv1d(&x_sq, &sigma_sq, bias_var.as_ref(), self.stride, self.padding)?;
                let eps = noise.sample(mean.shape());
                let out = reparam_combine(&mean, &var, &eps);
                let mut kl = kl_closed_form(&self.kernel, PriorSpec);
                if self.variational_bias {
                    kl += kl_closed_form(&self.bias, PriorSpec);
                }
                Ok((out, kl))
            }
        }
    }

    /// Register this layer's trainable tensors as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> VariationalLeaves {
        VariationalLeaves {
            mu: tape.param(self.kernel.mu.clone()),
            rho: tape.param(self.kernel.rho.clone()),
            bias_mu: tape.param(self.bias.mu.clone()),
            bias_rho: self.variational_bias.then(|| tape.param(self.bias.rho.clone())),
        }
    }

    /// Taped forward. Returns `(output, kl)` node ids.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        leaves: &VariationalLeaves,
        input: NodeId,
        mode: SampleMode,
        noise: &mut NoiseDraw,
    ) -> Result<(NodeId, NodeId), ShapeError> {
        taped_variational_apply(
            tape,
            leaves,
            input,
            mode,
            noise,
            |tape, x, w, b| tape.conv1d(x, w, Some(b), self.stride, self.padding),
        )
    }
}

/// Fully connected layer with a Gaussian posterior over its weights.
#[derive(Debug, Clone)]
pub struct BayesDense {
    pub weight: VariationalTensor,
    pub bias: VariationalTensor,
    pub variational_bias: bool,
}

impl BayesDense {
    pub fn init(f_in: usize, f_out: usize, variational_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = VariationalTensor::init(&[f_out, f_in], f_in, rng);
        let bias = VariationalTensor {
            mu: Tensor::zeros(&[f_out]),
            rho: Tensor::full(&[f_out], INIT_RHO),
        };
        BayesDense { weight, bias, variational_bias }
    }

    pub fn forward(
        &self,
        input: &Tensor,
        mode: SampleMode,
        noise: &mut NoiseDraw,
    ) -> Result<(Tensor, f64), ShapeError> {
        match mode {
            SampleMode::MeanOnly => {
                let out = ops::dense(input, &self.weight.mu, Some(&self.bias.mu))?;
                Ok((out, 0.0))
            }
            SampleMode::WeightSample => {
                let w = sample_weights(&self.weight, noise);
                let mut kl = kl_mc_terms(&self.weight, &w, PriorSpec);
                let b = if self.variational_bias {
                    let b = sample_weights(&self.bias, noise);
                    kl += kl_mc_terms(&self.bias, &b, PriorSpec);
                    b
                } else {
                    self.bias.mu.clone()
                };
                let out = ops::dense(input, &w, Some(&b))?;
                Ok((out, kl))
            }
            SampleMode::LocalReparam => {
                let mean = ops::dense(input, &self.weight.mu, Some(&self.bias.mu))?;
                let sigma_sq = square(&self.weight.sigma());
                let x_sq = square(input);
                let bias_var = self.variational_bias.then(|| square(&self.bias.sigma()));
                let var = ops::dense(&x_sq, &sigma_sq, bias_var.as_ref())?;
                let eps = noise.sample(mean.shape());
                let out = reparam_combine(&mean, &var, &eps);
                let mut kl = kl_closed_form(&self.weight, PriorSpec);
                if self.variational_bias {
                    kl += kl_closed_form(&self.bias, PriorSpec);
                }
                Ok((out, kl))
            }
        }
    }

    pub fn register(&self, tape: &mut Tape) -> VariationalLeaves {
        VariationalLeaves {
            mu: tape.param(self.weight.mu.clone()),
            rho: tape.param(self.weight.rho.clone()),
            bias_mu: tape.param(self.bias.mu.clone()),
            bias_rho: self.variational_bias.then(|| tape.param(self.bias.rho.clone())),
        }
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        leaves: &VariationalLeaves,
        input: NodeId,
        mode: SampleMode,
        noise: &mut NoiseDraw,
    ) -> Result<(NodeId, NodeId), ShapeError> {
        taped_variational_apply(tape, leaves, input, mode, noise, |tape, x, w, b| {
            tape.dense(x, w, Some(b))
        })
    }
}

/// `mean + sqrt(var + floor) * eps`, elementwise.
fn reparam_combine(mean: &Tensor, var: &Tensor, eps: &Tensor) -> Tensor {
    let data: Vec<f32> = mean
        .data()
        .iter()
        .zip(var.data())
        .zip(eps.data())
        .map(|((&m, &v), &e)| m + ((v as f64 + VARIANCE_FLOOR).max(0.0).sqrt() as f32) * e)
        .collect();
    Tensor::from_vec(mean.shape().to_vec(), data).expect("reparam shape")
}

fn square(t: &Tensor) -> Tensor {
    let data: Vec<f32> = t.data().iter().map(|&v| v * v).collect();
    Tensor::from_vec(t.shape().to_vec(), data).expect("square shape")
}

/// Shared taped path for both layer kinds. `apply` performs the linear
/// map given `(input, weight, bias)` nodes.
fn taped_variational_apply(
    tape: &mut Tape,
    leaves: &VariationalLeaves,
    input: NodeId,
    mode: SampleMode,
    noise: &mut NoiseDraw,
    mut apply: impl FnMut(&mut Tape, NodeId, NodeId, NodeId) -> Result<NodeId, ShapeError>,
) -> Result<(NodeId, NodeId), ShapeError> {
    match mode {
        SampleMode::MeanOnly => {
            let out = apply(tape, input, leaves.mu, leaves.bias_mu)?;
            let kl = tape.zero_scalar();
            Ok((out, kl))
        }
        SampleMode::WeightSample => {
            let sigma = tape.softplus(leaves.rho);
            let eps = tape.constant(noise.sample(tape.value(leaves.mu).shape()));
            let scaled = tape.mul(sigma, eps)?;
            let w = tape.add(leaves.mu, scaled)?;
            let mut kl = tape.gauss_kl(w, leaves.mu, sigma)?;

            let b = match leaves.bias_rho {
                Some(bias_rho) => {
                    let sigma_b = tape.softplus(bias_rho);
                    let eps_b =
                        tape.constant(noise.sample(tape.value(leaves.bias_mu).shape()));
                    let scaled_b = tape.mul(sigma_b, eps_b)?;
                    let b = tape.add(leaves.bias_mu, scaled_b)?;
                    let kl_b = tape.gauss_kl(b, leaves.bias_mu, sigma_b)?;
                    kl = tape.add(kl, kl_b)?;
                    b
                }
                None => leaves.bias_mu,
            };
            let out = apply(tape, input, w, b)?;
            Ok((out, kl))
        }
        SampleMode::LocalReparam => {
            let mean = apply(tape, input, leaves.mu, leaves.bias_mu)?;
            let sigma = tape.softplus(leaves.rho);
            let sigma_sq = tape.mul(sigma, sigma)?;
            let x_sq = tape.mul(input, input)?;
            let mut kl = tape.gauss_kl_closed(leaves.mu, sigma)?;

            // The variance path needs a bias slot; a non-variational bias
            // contributes zero variance.
            let var_bias = match leaves.bias_rho {
                Some(bias_rho) => {
                    let sigma_b = tape.softplus(bias_rho);
                    let kl_b = tape.gauss_kl_closed(leaves.bias_mu, sigma_b)?;
                    kl = tape.add(kl, kl_b)?;
                    tape.mul(sigma_b, sigma_b)?
                }
                None => {
                    let shape = tape.value(leaves.bias_mu).shape().to_vec();
                    tape.constant(Tensor::zeros(&shape))
                }
            };
            let var = apply(tape, x_sq, sigma_sq, var_bias)?;
            let std = tape.sqrt_shift(var, VARIANCE_FLOOR);
            let eps = tape.constant(noise.sample(tape.value(mean).shape()));
            let jitter = tape.mul(std, eps)?;
            let out = tape.add(mean, jitter)?;
            Ok((out, kl))
        }
    }
}
