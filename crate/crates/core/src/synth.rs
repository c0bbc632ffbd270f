//! Synthetic PPG substrate: pulse-train waveforms with controlled beat
//! irregularity and a four-part noise mixture (baseline wander, motion
//! spikes, contact loss, additive noise).
//!
//! Normal sinus rhythm uses near-constant beat intervals (small bounded
//! jitter); the AF class draws every interval independently with a wide
//! spread and no serial correlation. Each beat stamps a fixed asymmetric
//! double-bump pulse template. All randomness derives from the spec seed
//! through per-subject and per-segment substreams, so output is
//! bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DataError, Segment, SEGMENT_LEN, SEGMENT_SECONDS, TARGET_RATE};
use crate::seeds;

/// Generation parameters for one synthetic cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub nsr_subjects: usize,
    pub af_subjects: usize,
    pub segments_per_subject: usize,
    /// Subject base heart rate range, beats per minute.
    pub hr_range_bpm: (f64, f64),
    /// Within-subject heart-rate excursion per segment (+/- bpm), so
    /// rate alone cannot identify the rhythm class.
    pub segment_hr_swing_bpm: f64,
    /// NSR beat-interval jitter as a fraction of the base interval
    /// (uniform in +/- this value).
    pub nsr_jitter: f64,
    /// AF beat-interval spread as a fraction of the base interval
    /// (uniform in +/- this value, independent per beat).
    pub af_spread: f64,
    /// Baseline wander amplitude at full noise level.
    pub wander_amp: f64,
    /// Motion spikes per second at full noise level.
    pub spike_rate: f64,
    /// Contact-loss probability at full noise level.
    pub dropout_prob: f64,
    /// Additive Gaussian noise sigma at full noise level.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            nsr_subjects: 30,
            af_subjects: 20,
            segments_per_subject: 80,
            hr_range_bpm: (55.0, 95.0),
            segment_hr_swing_bpm: 12.0,
            nsr_jitter: 0.02,
            af_spread: 0.35,
            wander_amp: 1.2,
            spike_rate: 0.4,
            dropout_prob: 0.85,
            noise_sigma: 0.55,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::BadSpec(msg));
        if self.nsr_subjects == 0 || self.af_subjects == 0 {
            return bad("need at least one subject per class".into());
        }
        if self.segments_per_subject == 0 {
            return bad("segments_per_subject must be positive".into());
        }
        let (lo, hi) = self.hr_range_bpm;
        if !(20.0..=250.0).contains(&lo) || !(20.0..=250.0).contains(&hi) || lo > hi {
            return bad(format!("heart-rate range ({}, {}) bpm out of bounds", lo, hi));
        }
        if !(0.0..=40.0).contains(&self.segment_hr_swing_bpm) {
            return bad(format!(
                "segment_hr_swing_bpm {} outside [0, 40]",
                self.segment_hr_swing_bpm
            ));
        }
        if !(0.0..=0.2).contains(&self.nsr_jitter) {
            return bad(format!("nsr_jitter {} outside [0, 0.2]", self.nsr_jitter));
        }
        if !(0.0..=0.9).contains(&self.af_spread) {
            return bad(format!("af_spread {} outside [0, 0.9]", self.af_spread));
        }
        if self.wander_amp < 0.0 || self.spike_rate < 0.0 || self.noise_sigma < 0.0 {
            return bad("noise amplitudes must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob {} outside [0, 1]", self.dropout_prob));
        }
        Ok(())
    }

    pub fn total_segments(&self) -> usize {
        (self.nsr_subjects + self.af_subjects) * self.segments_per_subject
    }
}

/// Pulse template: primary systolic bump plus a smaller, wider dicrotic
/// bump, in seconds relative to beat onset.
const BUMP1_DELAY: f64 = 0.15;
const BUMP1_WIDTH: f64 = 0.05;
const BUMP1_AMP: f64 = 1.0;
const BUMP2_DELAY: f64 = 0.42;
const BUMP2_WIDTH: f64 = 0.09;
const BUMP2_AMP: f64 = 0.35;

fn stamp_beat(samples: &mut [f64], onset: f64, fs: f64) {
    for (delay, width, amp) in [
        (BUMP1_DELAY, BUMP1_WIDTH, BUMP1_AMP),
        (BUMP2_DELAY, BUMP2_WIDTH, BUMP2_AMP),
    ] {
        let center = onset + delay;
        let lo = ((center - 4.0 * width) * fs).floor().max(0.0) as usize;
        let hi = (((center + 4.0 * width) * fs).ceil() as usize).min(samples.len());
        for (i, v) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let t = i as f64 / fs;
            let d = (t - center) / width;
            *v += amp * (-0.5 * d * d).exp();
        }
    }
}

/// Generate raw (unpreprocessed) segments at 32 Hz.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Segment>, DataError> {
    spec.validate()?;
    let fs = TARGET_RATE as f64;
    let mut segments = Vec::with_capacity(spec.total_segments());
    let n_subjects = spec.nsr_subjects + spec.af_subjects;

    for subject in 0..n_subjects {
        let is_af = subject >= spec.nsr_subjects;
        let subject_id = format!("S{:04}", subject);
        let subject_seed = seeds::derive2(spec.seed, 0x7375_626a, subject as u64);
        let mut subject_rng = ChaCha8Rng::seed_from_u64(subject_seed);
        let base_hr = subject_rng.gen_range(spec.hr_range_bpm.0..=spec.hr_range_bpm.1);

        for seg_idx in 0..spec.segments_per_subject {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
                subject_seed,
                0x7365_676d,
                seg_idx as u64,
            ));
            let noise_level: f64 = rng.gen_range(0.0..=1.0);
            let swing = spec.segment_hr_swing_bpm;
            let segment_hr =
                (base_hr + rng.gen_range(-swing..=swing)).clamp(40.0, 140.0);
            let base_rr = 60.0 / segment_hr;

            // Beats from slightly before the window so the first visible
            // pulse is complete.
            let mut samples = vec![0.0f64; SEGMENT_LEN];
            let mut t = -2.0f64;
            while t < SEGMENT_SECONDS + 1.0 {
                stamp_beat(&mut samples, t, fs);
                let u: f64 = rng.gen_range(-1.0..=1.0);
                let rr = if is_af {
                    base_rr * (1.0 + spec.af_spread * u)
                } else {
                    base_rr * (1.0 + spec.nsr_jitter * u)
                };
                t += rr.max(0.25);
            }

            // Baseline wander: slow sinusoid.
            let wander_amp = spec.wander_amp * noise_level;
            if wander_amp > 0.0 {
                let freq = rng.gen_range(0.15..=0.45);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for (i, v) in samples.iter_mut().enumerate() {
                    let tt = i as f64 / fs;
                    *v += wander_amp * (std::f64::consts::TAU * freq * tt + phase).sin();
                }
            }

            // Motion spikes: short high-amplitude transients.
            let expected_spikes = spec.spike_rate * noise_level * SEGMENT_SECONDS;
            let n_spikes = expected_spikes.floor() as usize
                + usize::from(rng.gen_bool((expected_spikes.fract()).clamp(0.0, 1.0)));
            for _ in 0..n_spikes {
                let pos = rng.gen_range(0..SEGMENT_LEN);
                let amp = rng.gen_range(1.0..=3.0) * noise_level
                    * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let width = rng.gen_range(1..=3usize);
                for off in 0..width {
                    if pos + off < SEGMENT_LEN {
                        samples[pos + off] += amp;
                    }
                }
            }

            // Additive broadband noise.
            let sigma = spec.noise_sigma * noise_level;
            if sigma > 0.0 {
                for v in samples.iter_mut() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }

            // Contact loss: a zeroed interval whose length grows with the
            // noise level.
            if rng.gen_bool((spec.dropout_prob * noise_level).clamp(0.0, 1.0)) {
                let len_s = 3.0 + 12.0 * noise_level;
                let len = ((len_s * fs) as usize).min(SEGMENT_LEN);
                let start = rng.gen_range(0..=(SEGMENT_LEN - len));
                for v in &mut samples[start..start + len] {
                    *v = 0.0;
                }
            }

            segments.push(Segment {
                samples: samples.iter().map(|&v| v as f32).collect(),
                subject_id: subject_id.clone(),
                label: Some(u8::from(is_af)),
                noise_level: Some(noise_level as f32),
            });
        }
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let spec = SynthSpec {
            nsr_subjects: 2,
            af_subjects: 2,
            segments_per_subject: 3,
            ..SynthSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        let other = SynthSpec { seed: 1, ..spec };
        let c = synth_generate(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_labels_match_spec() {
        let spec = SynthSpec {
            nsr_subjects: 3,
            af_subjects: 2,
            segments_per_subject: 4,
            ..SynthSpec::default()
        };
        let segments = synth_generate(&spec).unwrap();
        assert_eq!(segments.len(), 20);
        let af = segments.iter().filter(|s| s.label == Some(1)).count();
        assert_eq!(af, 8);
        assert!(segments.iter().all(|s| s.samples.len() == SEGMENT_LEN));
        assert!(segments
            .iter()
            .all(|s| (0.0..=1.0).contains(&s.noise_level.unwrap())));
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SynthSpec { nsr_subjects: 0, ..SynthSpec::default() };
        assert!(synth_generate(&spec).is_err());
        let spec = SynthSpec { af_spread: 2.0, ..SynthSpec::default() };
        assert!(synth_generate(&spec).is_err());
        let spec = SynthSpec { hr_range_bpm: (95.0, 55.0), ..SynthSpec::default() };
        assert!(synth_generate(&spec).is_err());
    }
}
