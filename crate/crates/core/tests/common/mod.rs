//! Shared test oracles: independently coded 64-bit reference
//! implementations of every network computation (naive loops, two-pass
//! statistics), a reference full-network loss for finite-difference
//! gradient checks, and signal-analysis helpers for the synthetic
//! generator.

#![allow(dead_code)]

use beatkit::bayes::{NoiseDraw, SampleMode};
use beatkit::network::Network;

pub const FD_STEP: f64 = 1e-3;

pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / (analytic.abs() + 1e-8)
}

// ── Reference kernels (f64, naive) ───────────────────────────────────

pub fn ref_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Naive triple-loop cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn ref_conv1d(
    x: &[f64],
    batch: usize,
    c_in: usize,
    l: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let l_out = (l + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f64; batch * c_out * l_out];
    for bi in 0..batch {
        for co in 0..c_out {
            for lo in 0..l_out {
                let mut acc = bias.map(|b| b[co]).unwrap_or(0.0);
                for ci in 0..c_in {
                    for kk in 0..k {
                        let pos = lo * stride + kk;
                        if pos < padding || pos - padding >= l {
                            continue;
                        }
                        acc += w[(co * c_in + ci) * k + kk] * x[(bi * c_in + ci) * l + pos - padding];
                    }
                }
                out[(bi * c_out + co) * l_out + lo] = acc;
            }
        }
    }
    out
}

pub fn ref_dense(
    x: &[f64],
    batch: usize,
    f_in: usize,
    w: &[f64],
    f_out: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0f64; batch * f_out];
    for bi in 0..batch {
        for fo in 0..f_out {
            let mut acc = bias.map(|b| b[fo]).unwrap_or(0.0);
            for fi in 0..f_in {
                acc += x[bi * f_in + fi] * w[fo * f_in + fi];
            }
            out[bi * f_out + fo] = acc;
        }
    }
    out
}

/// Brute-force windowed maximum.
pub fn ref_maxpool(x: &[f64], rows: usize, l: usize, window: usize, stride: usize) -> Vec<f64> {
    let l_out = (l - window) / stride + 1;
    let mut out = vec![0.0f64; rows * l_out];
    for r in 0..rows {
        for lo in 0..l_out {
            let start = lo * stride;
            let mut best = f64::NEG_INFINITY;
            for off in 0..window {
                best = best.max(x[r * l + start + off]);
            }
            out[r * l_out + lo] = best;
        }
    }
    out
}

/// Two-pass mean/variance batch normalization (train mode).
pub fn ref_bn_train(
    x: &[f64],
    batch: usize,
    c: usize,
    l: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let n = (batch * l) as f64;
    let mut out = vec![0.0f64; x.len()];
    for ci in 0..c {
        let mut sum = 0.0;
        for bi in 0..batch {
            for li in 0..l {
                sum += x[(bi * c + ci) * l + li];
            }
        }
        let mean = sum / n;
        let mut var_sum = 0.0;
        for bi in 0..batch {
            for li in 0..l {
                let d = x[(bi * c + ci) * l + li] - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum / n;
        let inv = 1.0 / (var + eps).sqrt();
        for bi in 0..batch {
            for li in 0..l {
                let idx = (bi * c + ci) * l + li;
                out[idx] = gamma[ci] * (x[idx] - mean) * inv + beta[ci];
            }
        }
    }
    out
}

pub fn ref_gap(x: &[f64], batch: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; batch * c];
    for (row, slot) in out.iter_mut().enumerate() {
        *slot = x[row * l..row * l + l].iter().sum::<f64>() / l as f64;
    }
    out
}

pub fn ref_softmax_nll(logits: &[f64], labels: &[u8]) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for bi in 0..b {
        let (l0, l1) = (logits[2 * bi], logits[2 * bi + 1]);
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let ly = if labels[bi] == 0 { l0 } else { l1 };
        total += lse - ly;
    }
    total / b as f64
}

/// Full log-density difference, constants included (they cancel):
/// `log N(w; mu, sigma^2) - log N(w; 0, 1)`.
pub fn ref_gauss_kl_term(w: f64, mu: f64, sigma: f64) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let log_q = -0.5 * ln_2pi - sigma.ln() - (w - mu) * (w - mu) / (2.0 * sigma * sigma);
    let log_p = -0.5 * ln_2pi - w * w / 2.0;
    log_q - log_p
}

pub fn ref_kl_closed_term(mu: f64, sigma: f64) -> f64 {
    0.5 * (mu * mu + sigma * sigma - 1.0 - (sigma * sigma).ln())
}

// ── Reference network ────────────────────────────────────────────────

/// Architecture mirror used by the f64 reference forward.
#[derive(Clone)]
pub struct RefStage {
    pub channels: usize,
    pub kernel: usize,
    pub pool: Option<usize>,
    pub batchnorm: bool,
}

/// A 64-bit mirror of a network: parameters in canonical trainable order
/// (same order as `Network::trainable_params`).
#[derive(Clone)]
pub struct RefNet {
    pub input_len: usize,
    pub stages: Vec<RefStage>,
    pub dense_width: usize,
    pub variational_bias: bool,
    pub params: Vec<Vec<f64>>,
}

impl RefNet {
    pub fn from_network(net: &Network) -> RefNet {
        let cfg = net.config();
        RefNet {
            input_len: cfg.input_len,
            stages: cfg
                .stages
                .iter()
                .map(|s| RefStage {
                    channels: s.channels,
                    kernel: s.kernel,
                    pool: s.pool,
                    batchnorm: s.batchnorm,
                })
                .collect(),
            dense_width: cfg.dense_width,
            variational_bias: cfg.variational_bias,
            params: net
                .trainable_params()
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    /// `lambda * kl + mean_nll` for one draw, replaying the exact noise
    /// stream the production forward consumes.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        batch: &[f64],
        b: usize,
        labels: &[u8],
        mode: SampleMode,
        noise_seed: u64,
        noise_index: u64,
        lambda: f64,
    ) -> f64 {
        let mut noise = NoiseDraw::gaussian(noise_seed, noise_index);
        let mut draw = |shape: usize| -> Vec<f64> {
            noise.sample(&[shape]).data().iter().map(|&v| v as f64).collect()
        };

        let mut x = batch.to_vec();
        let mut c_in = 1usize;
        let mut l = self.input_len;
        let mut kl = 0.0f64;
        let mut cursor = 0usize;

        for stage in &self.stages {
            let c_out = stage.channels;
            let k = stage.kernel;
            let pad = k / 2;
            let mu = &self.params[cursor];
            let rho = &self.params[cursor + 1];
            let bias_mu = &self.params[cursor + 2];
            let bias_rho = self.variational_bias.then(|| &self.params[cursor + 3]);
            cursor += if self.variational_bias { 4 } else { 3 };

            let y = self.apply_linear(
                LinearKind::Conv { b, c_in, l, c_out, k, pad },
                &x,
                mu,
                rho,
                bias_mu,
                bias_rho,
                mode,
                &mut draw,
                &mut kl,
            );
            let mut y = y;
            if stage.batchnorm {
                let gamma = &self.params[cursor];
                let beta = &self.params[cursor + 1];
                cursor += 2;
                y = ref_bn_train(&y, b, c_out, l, gamma, beta, 1e-5);
            }
            for v in y.iter_mut() {
                *v = ref_softplus(*v);
            }
            if let Some(w) = stage.pool {
                y = ref_maxpool(&y, b * c_out, l, w, w);
                l = (l - w) / w + 1;
            }
            x = y;
            c_in = c_out;
        }

        let pooled = ref_gap(&x, b, c_in, l);
        let mut h = {
            let mu = &self.params[cursor];
            let rho = &self.params[cursor + 1];
            let bias_mu = &self.params[cursor + 2];
            let bias_rho = self.variational_bias.then(|| &self.params[cursor + 3]);
            cursor += if self.variational_bias { 4 } else { 3 };
            self.apply_linear(
                LinearKind::Dense { b, f_in: c_in, f_out: self.dense_width },
                &pooled,
                mu,
                rho,
                bias_mu,
                bias_rho,
                mode,
                &mut draw,
                &mut kl,
            )
        };
        for v in h.iter_mut() {
            *v = ref_softplus(*v);
        }
        let logits = {
            let mu = &self.params[cursor];
            let rho = &self.params[cursor + 1];
            let bias_mu = &self.params[cursor + 2];
            let bias_rho = self.variational_bias.then(|| &self.params[cursor + 3]);
            self.apply_linear(
                LinearKind::Dense { b, f_in: self.dense_width, f_out: 2 },
                &h,
                mu,
                rho,
                bias_mu,
                bias_rho,
                mode,
                &mut draw,
                &mut kl,
            )
        };
        lambda * kl + ref_softmax_nll(&logits, labels)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_linear(
        &self,
        kind: LinearKind,
        x: &[f64],
        mu: &[f64],
        rho: &[f64],
        bias_mu: &[f64],
        bias_rho: Option<&Vec<f64>>,
        mode: SampleMode,
        draw: &mut impl FnMut(usize) -> Vec<f64>,
        kl: &mut f64,
    ) -> Vec<f64> {
        let run = |w: &[f64], bias: &[f64]| -> Vec<f64> {
            match kind {
                LinearKind::Conv { b, c_in, l, c_out, k, pad } => {
                    ref_conv1d(x, b, c_in, l, w, c_out, k, Some(bias), 1, pad)
                }
                LinearKind::Dense { b, f_in, f_out } => {
                    ref_dense(x, b, f_in, w, f_out, Some(bias))
                }
            }
        };
        let sigma: Vec<f64> = rho.iter().map(|&r| ref_softplus(r)).collect();
        match mode {
            SampleMode::MeanOnly => run(mu, bias_mu),
            SampleMode::WeightSample => {
                let eps = draw(mu.len());
                let w: Vec<f64> =
                    mu.iter().zip(&sigma).zip(&eps).map(|((&m, &s), &e)| m + s * e).collect();
                for ((&wv, &m), &s) in w.iter().zip(mu).zip(&sigma) {
                    *kl += ref_gauss_kl_term(wv, m, s);
                }
                let bias: Vec<f64> = match bias_rho {
                    Some(brho) => {
                        let sigma_b: Vec<f64> = brho.iter().map(|&r| ref_softplus(r)).collect();
                        let eps_b = draw(bias_mu.len());
                        let bv: Vec<f64> = bias_mu
                            .iter()
                            .zip(&sigma_b)
                            .zip(&eps_b)
                            .map(|((&m, &s), &e)| m + s * e)
                            .collect();
                        for ((&wv, &m), &s) in bv.iter().zip(bias_mu).zip(&sigma_b) {
                            *kl += ref_gauss_kl_term(wv, m, s);
                        }
                        bv
                    }
                    None => bias_mu.to_vec(),
                };
                run(&w, &bias)
            }
            SampleMode::LocalReparam => {
                let mean = run(mu, bias_mu);
                for (&m, &s) in mu.iter().zip(&sigma) {
                    *kl += ref_kl_closed_term(m, s);
                }
                let sigma_sq: Vec<f64> = sigma.iter().map(|&s| s * s).collect();
                let x_sq: Vec<f64> = x.iter().map(|&v| v * v).collect();
                let bias_var: Vec<f64> = match bias_rho {
                    Some(brho) => {
                        let sigma_b: Vec<f64> = brho.iter().map(|&r| ref_softplus(r)).collect();
                        for (&m, &s) in bias_mu.iter().zip(&sigma_b) {
                            *kl += ref_kl_closed_term(m, s);
                        }
                        sigma_b.iter().map(|&s| s * s).collect()
                    }
                    None => vec![0.0; bias_mu.len()],
                };
                let var = match kind {
                    LinearKind::Conv { b, c_in, l, c_out, k, pad } => {
                        ref_conv1d(&x_sq, b, c_in, l, &sigma_sq, c_out, k, Some(&bias_var), 1, pad)
                    }
                    LinearKind::Dense { b, f_in, f_out } => {
                        ref_dense(&x_sq, b, f_in, &sigma_sq, f_out, Some(&bias_var))
                    }
                };
                let eps = draw(mean.len());
                mean.iter()
                    .zip(&var)
                    .zip(&eps)
                    .map(|((&m, &v), &e)| m + (v + 1e-10).max(0.0).sqrt() * e)
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy)]
enum LinearKind {
    Conv { b: usize, c_in: usize, l: usize, c_out: usize, k: usize, pad: usize },
    Dense { b: usize, f_in: usize, f_out: usize },
}

// ── Signal analysis helpers ──────────────────────────────────────────

/// Local-maximum pulse detector: peaks above half the signal maximum,
/// separated by at least `min_separation_s`.
pub fn detect_peaks(samples: &[f32], fs: f64, min_separation_s: f64) -> Vec<usize> {
    let max = samples.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let min = samples.iter().cloned().fold(f32::INFINITY, f32::min);
    let threshold = min + 0.5 * (max - min);
    let min_gap = (min_separation_s * fs) as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..samples.len() - 1 {
        if samples[i] >= threshold && samples[i] > samples[i - 1] && samples[i] >= samples[i + 1] {
            if let Some(&last) = peaks.last() {
                if i - last < min_gap {
                    // Keep the taller of the two contenders.
                    if samples[i] > samples[last] {
                        peaks.pop();
                        peaks.push(i);
                    }
                    continue;
                }
            }
            peaks.push(i);
        }
    }
    peaks
}

/// Sub-sample peak refinement: parabola through the three samples around
/// each detected maximum.
pub fn refine_peaks(samples: &[f32], peaks: &[usize]) -> Vec<f64> {
    peaks
        .iter()
        .map(|&p| {
            if p == 0 || p + 1 >= samples.len() {
                return p as f64;
            }
            let (ym, y0, yp) =
                (samples[p - 1] as f64, samples[p] as f64, samples[p + 1] as f64);
            let denom = ym - 2.0 * y0 + yp;
            if denom.abs() < 1e-12 {
                p as f64
            } else {
                p as f64 + 0.5 * (ym - yp) / denom
            }
        })
        .collect()
}

/// Coefficient of variation of inter-peak intervals.
pub fn rr_cv(peaks: &[f64]) -> Option<f64> {
    if peaks.len() < 3 {
        return None;
    }
    let intervals: Vec<f64> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = intervals.iter().sum::<f64>() / intervals.len() as f64;
    let var = intervals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / intervals.len() as f64;
    Some(var.sqrt() / mean)
}

/// Interval CV of a waveform via detection + sub-sample refinement.
pub fn waveform_rr_cv(samples: &[f32], fs: f64) -> Option<f64> {
    let peaks = detect_peaks(samples, fs, 0.35);
    rr_cv(&refine_peaks(samples, &peaks))
}

/// RR-variability oracle classifier: AF when the interval CV exceeds
/// the threshold.
pub fn cv_classifier(samples: &[f32], fs: f64, cv_threshold: f64) -> Option<u8> {
    waveform_rr_cv(samples, fs).map(|cv| u8::from(cv > cv_threshold))
}
