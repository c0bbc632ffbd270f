//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Values live in an arena indexed by [`NodeId`]. Forward calls compute the
//! result eagerly (through the kernels in [`crate::ops`]) and append an
//! operation record; [`Tape::backward`] replays the records in reverse,
//! accumulating cotangents. Leaves registered via [`Tape::param`] are
//! guaranteed a gradient entry — exact zeros when they did not influence
//! the loss.

use std::fmt;

use crate::ops;
use crate::tensor::{expect_same_shape, ShapeError, Tensor};

/// Index of a value in the tape arena.
pub type NodeId = usize;

#[derive(Debug)]
pub enum TapeError {
    /// backward() was already called on this tape.
    Consumed,
    /// backward() requires a scalar loss node.
    NonScalarLoss { numel: usize },
    Shape(ShapeError),
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::Consumed => write!(f, "tape already consumed by a backward pass"),
            TapeError::NonScalarLoss { numel } => {
                write!(f, "loss must be scalar, node has {} elements", numel)
            }
            TapeError::Shape(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for TapeError {}

impl From<ShapeError> for TapeError {
    fn from(e: ShapeError) -> Self {
        TapeError::Shape(e)
    }
}

enum Op {
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        out: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        out: NodeId,
    },
    MaxPool1d {
        input: NodeId,
        argmax: Vec<u32>,
        out: NodeId,
    },
    BatchNorm1d {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: ops::BnStats,
        out: NodeId,
    },
    Softplus {
        input: NodeId,
        out: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
        out: NodeId,
    },
    SoftmaxNll {
        logits: NodeId,
        labels: Vec<u8>,
        probs: Tensor,
        out: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
        out: NodeId,
    },
    SqrtShift {
        input: NodeId,
        shift: f64,
        out: NodeId,
    },
    Sum {
        input: NodeId,
        out: NodeId,
    },
    /// Per-draw Monte Carlo KL contribution of a Gaussian posterior
    /// against the standard-normal prior:
    /// `sum_j [ -ln sigma_j - (w_j - mu_j)^2 / (2 sigma_j^2) + w_j^2 / 2 ]`.
    GaussKl {
        w: NodeId,
        mu: NodeId,
        sigma: NodeId,
        out: NodeId,
    },
    /// Closed-form KL of a Gaussian posterior against the standard-normal
    /// prior: `sum_j 0.5 (mu_j^2 + sigma_j^2 - 1 - ln sigma_j^2)`.
    GaussKlClosed {
        mu: NodeId,
        sigma: NodeId,
        out: NodeId,
    },
}

/// Gradients produced by a backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a node, or `None` when no gradient flowed to it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    /// Gradient for a node, with exact zeros when nothing flowed to it.
    pub fn get_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }
}

/// Recorded computation supporting one reverse sweep.
pub struct Tape {
    values: Vec<Tensor>,
    /// Whether a gradient must flow to this node (true for params and
    /// anything derived from one). Constants and their pure derivations
    /// skip gradient work entirely.
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), needs_grad: Vec::new(), ops: Vec::new(), consumed: false }
    }

    fn push_value(&mut self, t: Tensor, needs_grad: bool) -> NodeId {
        let id = self.values.len();
        self.values.push(t);
        self.needs_grad.push(needs_grad);
        id
    }

    fn push_derived(&mut self, t: Tensor, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|&i| self.needs_grad[i]);
        self.push_value(t, needs)
    }

    /// Register a non-differentiated input (data, noise draws).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_value(t, false)
    }

    /// Register a leaf parameter. Snapshot semantics: the tape owns a copy.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push_value(t, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    // ── Recorded operations ──────────────────────────────────────

    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, ShapeError> {
        let out_t = ops::conv1d(
            &self.values[input],
            &self.values[kernel],
            bias.map(|b| &self.values[b]),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let out = self.push_derived(out_t, &deps);
        self.ops.push(Op::Conv1d { input, kernel, bias, stride, padding, out });
        Ok(out)
    }

    pub fn dense(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, ShapeError> {
        let out_t = ops::dense(
            &self.values[input],
            &self.values[weight],
            bias.map(|b| &self.values[b]),
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let out = self.push_derived(out_t, &deps);
        self.ops.push(Op::Dense { input, weight, bias, out });
        Ok(out)
    }

    pub fn maxpool1d(
        &mut self,
        input: NodeId,
        window: usize,
        stride: usize,
    ) -> Result<NodeId, ShapeError> {
        let (out_t, argmax) = ops::maxpool1d(&self.values[input], window, stride)?;
        let out = self.push_derived(out_t, &[input]);
        self.ops.push(Op::MaxPool1d { input, argmax, out });
        Ok(out)
    }

    /// Train-mode batch normalization; returns the output node and the
    /// batch statistics so the caller can maintain running estimates.
    pub fn batchnorm1d_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, ops::BnStats), ShapeError> {
        let (out_t, stats) = ops::batchnorm1d_train(
            &self.values[input],
            &self.values[gamma],
            &self.values[beta],
            eps,
        )?;
        let out = self.push_derived(out_t, &[input, gamma, beta]);
        self.ops.push(Op::BatchNorm1d { input, gamma, beta, stats: stats.clone(), out });
        Ok((out, stats))
    }

    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        let out_t = ops::softplus(&self.values[input]);
        let out = self.push_derived(out_t, &[input]);
        self.ops.push(Op::Softplus { input, out });
        out
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, ShapeError> {
        let out_t = ops::global_avg_pool(&self.values[input])?;
        let out = self.push_derived(out_t, &[input]);
        self.ops.push(Op::GlobalAvgPool { input, out });
        Ok(out)
    }

    pub fn softmax_nll(&mut self, logits: NodeId, labels: Vec<u8>) -> Result<NodeId, ShapeError> {
        let (loss, probs) = ops::softmax_nll(&self.values[logits], &labels)?;
        let out = self.push_derived(loss, &[logits]);
        self.ops.push(Op::SoftmaxNll { logits, labels, probs, out });
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        expect_same_shape("add", &self.values[a], &self.values[b])?;
        let data: Vec<f32> = self.values[a]
            .data()
            .iter()
            .zip(self.values[b].data())
            .map(|(x, y)| x + y)
            .collect();
        let out_t = Tensor::from_vec(self.values[a].shape().to_vec(), data)?;
        let out = self.push_derived(out_t, &[a, b]);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        expect_same_shape("mul", &self.values[a], &self.values[b])?;
        let data: Vec<f32> = self.values[a]
            .data()
            .iter()
            .zip(self.values[b].data())
            .map(|(x, y)| x * y)
            .collect();
        let out_t = Tensor::from_vec(self.values[a].shape().to_vec(), data)?;
        let out = self.push_derived(out_t, &[a, b]);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let data: Vec<f32> =
            self.values[input].data().iter().map(|&x| (x as f64 * factor) as f32).collect();
        let out_t = Tensor::from_vec(self.values[input].shape().to_vec(), data).expect("scale");
        let out = self.push_derived(out_t, &[input]);
        self.ops.push(Op::Scale { input, factor, out });
        out
    }

    /// Elementwise `sqrt(x + shift)`; the shift keeps gradients bounded
    /// when variances collapse toward zero.
    pub fn sqrt_shift(&mut self, input: NodeId, shift: f64) -> NodeId {
        let data: Vec<f32> = self.values[input]
            .data()
            .iter()
            .map(|&x| ((x as f64 + shift).max(0.0)).sqrt() as f32)
            .collect();
        let out_t =
            Tensor::from_vec(self.values[input].shape().to_vec(), data).expect("sqrt_shift");
        let out = self.push_derived(out_t, &[input]);
        self.ops.push(Op::SqrtShift { input, shift, out });
        out
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.values[input].data().iter().map(|&x| x as f64).sum();
        let out = self.push_derived(Tensor::scalar(total as f32), &[input]);
        self.ops.push(Op::Sum { input, out });
        out
    }

    /// Scalar zero constant, useful as a neutral accumulator.
    pub fn zero_scalar(&mut self) -> NodeId {
        self.constant(Tensor::scalar(0.0))
    }

    pub fn gauss_kl(
        &mut self,
        w: NodeId,
        mu: NodeId,
        sigma: NodeId,
    ) -> Result<NodeId, ShapeError> {
        expect_same_shape("gauss_kl", &self.values[w], &self.values[mu])?;
        expect_same_shape("gauss_kl", &self.values[w], &self.values[sigma])?;
        let mut acc = 0.0f64;
        for ((&wv, &mv), &sv) in self.values[w]
            .data()
            .iter()
            .zip(self.values[mu].data())
            .zip(self.values[sigma].data())
        {
            let (wv, mv, sv) = (wv as f64, mv as f64, sv as f64);
            let d = wv - mv;
            acc += -sv.ln() - d * d / (2.0 * sv * sv) + wv * wv / 2.0;
        }
        let out = self.push_derived(Tensor::scalar(acc as f32), &[w, mu, sigma]);
        self.ops.push(Op::GaussKl { w, mu, sigma, out });
        Ok(out)
    }

    pub fn gauss_kl_closed(&mut self, mu: NodeId, sigma: NodeId) -> Result<NodeId, ShapeError> {
        expect_same_shape("gauss_kl_closed", &self.values[mu], &self.values[sigma])?;
        let mut acc = 0.0f64;
        for (&mv, &sv) in self.values[mu].data().iter().zip(self.values[sigma].data()) {
            let (mv, sv) = (mv as f64, sv as f64);
            acc += 0.5 * (mv * mv + sv * sv - 1.0) - sv.ln();
        }
        let out = self.push_derived(Tensor::scalar(acc as f32), &[mu, sigma]);
        self.ops.push(Op::GaussKlClosed { mu, sigma, out });
        Ok(out)
    }

    // ── Backward pass ────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, TapeError> {
        let numel = self.values[loss].numel();
        if numel != 1 {
            return Err(TapeError::NonScalarLoss { numel });
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an explicit cotangent for `node`.
    pub fn backward_seeded(
        &mut self,
        node: NodeId,
        cotangent: Tensor,
    ) -> Result<Gradients, TapeError> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        self.consumed = true;
        expect_same_shape("backward", &self.values[node], &cotangent)?;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[node] = Some(cotangent);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }

        let shapes = self.values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.needs_grad[id];
        match op {
            Op::Conv1d { input, kernel, bias, stride, padding, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                let wants = ops::GradWants {
                    input: needs(*input),
                    kernel: needs(*kernel),
                    bias: bias.map(needs).unwrap_or(false),
                };
                let (d_in, d_w, d_b) = ops::conv1d_backward(
                    &self.values[*input],
                    &self.values[*kernel],
                    &dy,
                    *stride,
                    *padding,
                    wants,
                );
                if let Some(d_in) = d_in {
                    accumulate(grads, *input, d_in);
                }
                if let Some(d_w) = d_w {
                    accumulate(grads, *kernel, d_w);
                }
                if let (Some(bias), Some(d_b)) = (bias, d_b) {
                    accumulate(grads, *bias, d_b);
                }
            }
            Op::Dense { input, weight, bias, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                let wants = ops::GradWants {
                    input: needs(*input),
                    kernel: needs(*weight),
                    bias: bias.map(needs).unwrap_or(false),
                };
                let (d_in, d_w, d_b) = ops::dense_backward(
                    &self.values[*input],
                    &self.values[*weight],
                    &dy,
                    wants,
                );
                if let Some(d_in) = d_in {
                    accumulate(grads, *input, d_in);
                }
                if let Some(d_w) = d_w {
                    accumulate(grads, *weight, d_w);
                }
                if let (Some(bias), Some(d_b)) = (bias, d_b) {
                    accumulate(grads, *bias, d_b);
                }
            }
            Op::MaxPool1d { input, argmax, out } => {
                if !needs(*input) {
                    return;
                }
                let Some(dy) = grads[*out].as_ref() else { return };
                let d_in = ops::maxpool1d_backward(dy, argmax, self.values[*input].shape());
                accumulate(grads, *input, d_in);
            }
            Op::BatchNorm1d { input, gamma, beta, stats, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                let (d_in, d_gamma, d_beta) = ops::batchnorm1d_backward(
                    &self.values[*input],
                    &self.values[*gamma],
                    stats,
                    &dy,
                );
                if needs(*input) {
                    accumulate(grads, *input, d_in);
                }
                accumulate(grads, *gamma, d_gamma);
                accumulate(grads, *beta, d_beta);
            }
            Op::Softplus { input, out } => {
                if !needs(*input) {
                    return;
                }
                let Some(dy) = grads[*out].as_ref() else { return };
                let d_in = ops::softplus_backward(&self.values[*input], dy);
                accumulate(grads, *input, d_in);
            }
            Op::GlobalAvgPool { input, out } => {
                if !needs(*input) {
                    return;
                }
                let Some(dy) = grads[*out].as_ref() else { return };
                let d_in = ops::global_avg_pool_backward(dy, self.values[*input].shape());
                accumulate(grads, *input, d_in);
            }
            Op::SoftmaxNll { logits, labels, probs, out } => {
                if !needs(*logits) {
                    return;
                }
                let Some(dy) = grads[*out].as_ref() else { return };
                let d_logits = ops::softmax_nll_backward(probs, labels, dy.item());
                accumulate(grads, *logits, d_logits);
            }
            Op::Add { a, b, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                if needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, dy);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(dy) = grads[*out].clone() else { return };
                if needs(*a) {
                    let d_a = elementwise_product(&dy, &self.values[*b]);
                    accumulate(grads, *a, d_a);
                }
                if needs(*b) {
                    let d_b = elementwise_product(&dy, &self.values[*a]);
                    accumulate(grads, *b, d_b);
                }
            }
            Op::Scale { input, factor, out } => {
                if !needs(*input) {
                    return;
                }
                let Some(dy) = grads[*out].as_ref() else { return };
                let data: Vec<f32> =
                    dy.data().iter().map(|&g| (g as f64 * factor) as f32).collect();
                let d_in = Tensor::from_vec(dy.shape().to_vec(), data).expect("scale grad");
                accumulate(grads, *input, d_in);
            }
            Op::SqrtShift { input, shift, out } => {
                if !needs(*input) {
                    return;
                }
                let Some(dy) = grads[*out].as_ref() else { return };
                let x = self.values[*input].data();
                let data: Vec<f32> = dy
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| {
                        let root = ((v as f64 + shift).max(0.0)).sqrt();
                        (g as f64 * 0.5 / root) as f32
                    })
                    .collect();
                let d_in = Tensor::from_vec(dy.shape().to_vec(), data).expect("sqrt grad");
                accumulate(grads, *input, d_in);
            }
            Op::Sum { input, out } => {
                if !needs(*input) {
                    return;
                }
                let Some(dy) = grads[*out].as_ref() else { return };
                let d_in = Tensor::full(self.values[*input].shape(), dy.item());
                accumulate(grads, *input, d_in);
            }
            Op::GaussKl { w, mu, sigma, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let g = dy.item() as f64;
                let wv = self.values[*w].data();
                let mv = self.values[*mu].data();
                let sv = self.values[*sigma].data();
                let n = wv.len();
                let mut d_w = vec![0.0f32; n];
                let mut d_mu = vec![0.0f32; n];
                let mut d_sigma = vec![0.0f32; n];
                for j in 0..n {
                    let (wj, mj, sj) = (wv[j] as f64, mv[j] as f64, sv[j] as f64);
                    let d = wj - mj;
                    let s2 = sj * sj;
                    d_w[j] = (g * (-d / s2 + wj)) as f32;
                    d_mu[j] = (g * (d / s2)) as f32;
                    d_sigma[j] = (g * (-1.0 / sj + d * d / (s2 * sj))) as f32;
                }
                let shape = self.values[*w].shape().to_vec();
                accumulate(grads, *w, Tensor::from_vec(shape.clone(), d_w).expect("kl w grad"));
                accumulate(grads, *mu, Tensor::from_vec(shape.clone(), d_mu).expect("kl mu grad"));
                accumulate(grads, *sigma, Tensor::from_vec(shape, d_sigma).expect("kl s grad"));
            }
            Op::GaussKlClosed { mu, sigma, out } => {
                let Some(dy) = grads[*out].as_ref() else { return };
                let g = dy.item() as f64;
                let mv = self.values[*mu].data();
                let sv = self.values[*sigma].data();
                let d_mu: Vec<f32> = mv.iter().map(|&m| (g * m as f64) as f32).collect();
                let d_sigma: Vec<f32> = sv
                    .iter()
                    .map(|&s| {
                        let s = s as f64;
                        (g * (s - 1.0 / s)) as f32
                    })
                    .collect();
                let shape = self.values[*mu].shape().to_vec();
                accumulate(grads, *mu, Tensor::from_vec(shape.clone(), d_mu).expect("kl mu grad"));
                accumulate(grads, *sigma, Tensor::from_vec(shape, d_sigma).expect("kl s grad"));
            }
        }
    }
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("product shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
