//! Waveforms, spectral representations and augmentations.

mod augment;
mod spectral;
mod wav;

pub use augment::{
    fit_length, mixup, pitch_shift, pitch_shift_with, snr_mix, snr_noise_scale, VocoderConfig, MAX_SEMITONES,
};
pub use spectral::{full_dft_magnitude, stft_magnitude, FeatureBundle, StftConfig, WindowFunction};
pub use wav::{quantize_pcm16, read_wav, write_wav};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Mono audio at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub const SAMPLE_RATE: u32 = 16_000;

    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        Self::SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / Self::SAMPLE_RATE as f64
    }
}

/// Triplet augmentation ranges and loss constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    /// SNR range for positives, dB.
    pub alpha_db_range: (f64, f64),
    /// Pitch-shift magnitude range for negatives, semitones; sign drawn ±.
    pub beta_semitone_range: (f64, f64),
    pub tau: f64,
    pub gamma: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            alpha_db_range: (-5.0, 20.0),
            beta_semitone_range: (6.0, 12.0),
            tau: 0.2,
            gamma: 0.5,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.alpha_db_range;
        let (b0, b1) = self.beta_semitone_range;
        if !(a0.is_finite() && a1.is_finite() && a0 <= a1) {
            return invalid(format!(
                "alpha range {:?} must be finite and ordered",
                self.alpha_db_range
            ));
        }
        if !(b0 > 0.0 && b0 <= b1 && b1 <= MAX_SEMITONES) {
            return invalid(format!(
                "beta range {:?} must be positive and ordered",
                self.beta_semitone_range
            ));
        }
        if !(self.tau > 0.0) {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.gamma >= 0.0) {
            return invalid(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        Ok(())
    }

    /// Uniform SNR draw in dB.
    pub fn sample_alpha(&self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = self.alpha_db_range;
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    }

    /// Uniform magnitude draw with a fair random sign.
    pub fn sample_beta(&self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = self.beta_semitone_range;
        let mag = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    }
}
