//! Flat key-value run configuration: one merged view over the synthesis,
//! training, network, and inference settings, loadable from a text file
//! with `key = value` lines and `#` comments. Command-line flags override
//! file values.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::bayes::SampleMode;
use crate::network::{NetworkConfig, StageSpec};
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Merged configuration for every command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub net: NetworkConfig,
    /// Monte Carlo draws at inference time.
    pub infer_draws: usize,
    /// Uncertainty threshold; `None` accepts everything.
    pub threshold: Option<f64>,
    pub split_fractions: [f64; 3],
    /// Worker threads; 0 means all cores.
    pub threads: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            net: NetworkConfig::standard(),
            infer_draws: 64,
            threshold: None,
            split_fractions: [0.70, 0.15, 0.15],
            threads: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {}: expected key = value", line_no + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {}", line_no + 1, e.0)))?;
        }
        Ok(cfg)
    }

    /// Route one root seed into every subsystem.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| ConfigError(format!("{}: bad integer {:?}", key, v)))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>().map_err(|_| ConfigError(format!("{}: bad number {:?}", key, v)))
        };
        let parse_bool = |v: &str| {
            v.parse::<bool>().map_err(|_| ConfigError(format!("{}: bad bool {:?}", key, v)))
        };
        match key {
            "seed" => {
                let seed = value
                    .parse::<u64>()
                    .map_err(|_| ConfigError(format!("seed: bad integer {:?}", value)))?;
                self.set_seed(seed);
            }
            "threads" => self.threads = parse_usize(value)?,

            "synth.nsr_subjects" => self.synth.nsr_subjects = parse_usize(value)?,
            "synth.af_subjects" => self.synth.af_subjects = parse_usize(value)?,
            "synth.segments_per_subject" => {
                self.synth.segments_per_subject = parse_usize(value)?
            }
            "synth.hr_low_bpm" => self.synth.hr_range_bpm.0 = parse_f64(value)?,
            "synth.hr_high_bpm" => self.synth.hr_range_bpm.1 = parse_f64(value)?,
            "synth.nsr_jitter" => self.synth.nsr_jitter = parse_f64(value)?,
            "synth.af_spread" => self.synth.af_spread = parse_f64(value)?,
            "synth.wander_amp" => self.synth.wander_amp = parse_f64(value)?,
            "synth.spike_rate" => self.synth.spike_rate = parse_f64(value)?,
            "synth.dropout_prob" => self.synth.dropout_prob = parse_f64(value)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse_f64(value)?,

            "train.batch_size" => self.train.batch_size = parse_usize(value)?,
            "train.learning_rate" => self.train.learning_rate = parse_f64(value)?,
            "train.epochs" => self.train.epochs = parse_usize(value)?,
            "train.mc_draws" => self.train.mc_draws = parse_usize(value)?,
            "train.kl_scale" => self.train.kl_scale = parse_f64(value)?,
            "train.beta1" => self.train.beta1 = parse_f64(value)?,
            "train.beta2" => self.train.beta2 = parse_f64(value)?,
            "train.eps_opt" => self.train.eps_opt = parse_f64(value)?,
            "train.mode" => {
                self.train.mode = SampleMode::parse(value).ok_or_else(|| {
                    ConfigError(format!(
                        "train.mode: {:?} is not weight-sample | local-reparam",
                        value
                    ))
                })?;
                if self.train.mode == SampleMode::MeanOnly {
                    return Err(ConfigError("train.mode: mean-only cannot train".into()));
                }
            }

            "net.input_len" => self.net.input_len = parse_usize(value)?,
            "net.dense_width" => self.net.dense_width = parse_usize(value)?,
            "net.variational_bias" => self.net.variational_bias = parse_bool(value)?,
            "net.enforce_architecture" => self.net.enforce_architecture = parse_bool(value)?,
            "net.stages" => {
                let mut stages = Vec::new();
                for part in value.split(';') {
                    let fields: Vec<&str> = part.split(',').map(str::trim).collect();
                    if fields.len() != 4 {
                        return Err(ConfigError(format!(
                            "net.stages: stage {:?} must be channels,kernel,pool|none,bn|nobn",
                            part
                        )));
                    }
                    stages.push(StageSpec {
                        channels: fields[0]
                            .parse()
                            .map_err(|_| ConfigError(format!("net.stages: bad channels in {:?}", part)))?,
                        kernel: fields[1]
                            .parse()
                            .map_err(|_| ConfigError(format!("net.stages: bad kernel in {:?}", part)))?,
                        pool: match fields[2] {
                            "none" => None,
                            w => Some(w.parse().map_err(|_| {
                                ConfigError(format!("net.stages: bad pool in {:?}", part))
                            })?),
                        },
                        batchnorm: match fields[3] {
                            "bn" => true,
                            "nobn" => false,
                            _ => {
                                return Err(ConfigError(format!(
                                    "net.stages: bad batchnorm flag in {:?}",
                                    part
                                )))
                            }
                        },
                    });
                }
                self.net.stages = stages;
            }

            "infer.mc_draws" => self.infer_draws = parse_usize(value)?,
            "infer.threshold" => {
                self.threshold = match value {
                    "none" => None,
                    v => Some(parse_f64(v)?),
                };
            }

            "split.train_frac" => self.split_fractions[0] = parse_f64(value)?,
            "split.val_frac" => self.split_fractions[1] = parse_f64(value)?,
            "split.test_frac" => self.split_fractions[2] = parse_f64(value)?,

            other => return Err(ConfigError(format!("unknown key {:?}", other))),
        }
        Ok(())
    }

    /// Full validation before any command does work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.net.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.infer_draws == 0 {
            return Err(ConfigError("infer.mc_draws must be >= 1".into()));
        }
        if let Some(t) = self.threshold {
            if t.is_nan() || t < 0.0 {
                return Err(ConfigError(format!("infer.threshold {} must be >= 0", t)));
            }
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|&f| f <= 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(ConfigError(format!(
                "split fractions {:?} must be positive and sum to 1",
                self.split_fractions
            )));
        }
        Ok(())
    }

    /// Echoable flat rendering of the effective configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("threads = {}\n", self.threads));
        out.push_str(&format!("synth.nsr_subjects = {}\n", self.synth.nsr_subjects));
        out.push_str(&format!("synth.af_subjects = {}\n", self.synth.af_subjects));
        out.push_str(&format!(
            "synth.segments_per_subject = {}\n",
            self.synth.segments_per_subject
        ));
        out.push_str(&format!("synth.hr_low_bpm = {}\n", self.synth.hr_range_bpm.0));
        out.push_str(&format!("synth.hr_high_bpm = {}\n", self.synth.hr_range_bpm.1));
        out.push_str(&format!("synth.nsr_jitter = {}\n", self.synth.nsr_jitter));
        out.push_str(&format!("synth.af_spread = {}\n", self.synth.af_spread));
        out.push_str(&format!("synth.wander_amp = {}\n", self.synth.wander_amp));
        out.push_str(&format!("synth.spike_rate = {}\n", self.synth.spike_rate));
        out.push_str(&format!("synth.dropout_prob = {}\n", self.synth.dropout_prob));
        out.push_str(&format!("synth.noise_sigma = {}\n", self.synth.noise_sigma));
        out.push_str(&format!("train.batch_size = {}\n", self.train.batch_size));
        out.push_str(&format!("train.learning_rate = {}\n", self.train.learning_rate));
        out.push_str(&format!("train.epochs = {}\n", self.train.epochs));
        out.push_str(&format!("train.mc_draws = {}\n", self.train.mc_draws));
        out.push_str(&format!("train.kl_scale = {}\n", self.train.kl_scale));
        out.push_str(&format!("train.mode = {}\n", self.train.mode.as_str()));
        out.push_str(&format!("infer.mc_draws = {}\n", self.infer_draws));
        out.push_str(&format!(
            "infer.threshold = {}\n",
            self.threshold.map(|t| t.to_string()).unwrap_or_else(|| "none".into())
        ));
        out.push_str(&format!("split.train_frac = {}\n", self.split_fractions[0]));
        out.push_str(&format!("split.val_frac = {}\n", self.split_fractions[1]));
        out.push_str(&format!("split.test_frac = {}\n", self.split_fractions[2]));
        out.push_str(&format!("net.param_count = {}\n", self.net.param_count()));
        out
    }
}
