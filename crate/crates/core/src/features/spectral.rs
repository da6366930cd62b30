use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFunction {
    Hann,
    Rectangular,
}

impl WindowFunction {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f32> {
        match self {
            WindowFunction::Rectangular => vec![1.0; n],
            WindowFunction::Hann => (0..n)
                .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
                .collect(),
        }
    }
}

/// STFT settings. Hop is always half the window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_fraction: f64,
    pub window_function: WindowFunction,
}

impl StftConfig {
    pub fn new(window_ms: f64) -> Self {
        Self {
            window_ms,
            hop_fraction: 0.5,
            window_function: WindowFunction::Hann,
        }
    }

    /// 8 ms window, 50 % hop.
    pub fn short() -> Self {
        Self::new(8.0)
    }

    /// 256 ms window, 50 % hop.
    pub fn long() -> Self {
        Self::new(256.0)
    }

    pub fn window_len(&self) -> usize {
        (self.window_ms * Waveform::SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        ((self.window_len() as f64 * self.hop_fraction).round() as usize).max(1)
    }

    pub fn bins(&self) -> usize {
        self.window_len() / 2 + 1
    }

    /// `floor((len - window) / hop) + 1`, or `None` when the signal is shorter than a window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let w = self.window_len();
        (len >= w).then(|| (len - w) / self.hop_len() + 1)
    }

    fn validate(&self) -> Result<()> {
        if !(self.window_ms > 0.0) || self.window_len() < 2 {
            return invalid(format!("window of {} ms is too short", self.window_ms));
        }
        if !(self.hop_fraction > 0.0 && self.hop_fraction <= 1.0) {
            return invalid(format!("hop fraction {} outside (0, 1]", self.hop_fraction));
        }
        Ok(())
    }
}

thread_local! {
    static PLANNER_F32: RefCell<FftPlanner<f32>> = RefCell::new(FftPlanner::new());
}

/// Forward plan from a per-thread cache.
fn plan(n: usize) -> Arc<dyn Fft<f32>> {
    PLANNER_F32.with(|p| p.borrow_mut().plan_fft_forward(n))
}

/// Magnitude STFT without padding: `(frames, window / 2 + 1)`.
pub fn stft_magnitude(w: &Waveform, cfg: &StftConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let win_len = cfg.window_len();
    let hop = cfg.hop_len();
    let x = w.samples();
    let frames = cfg.frame_count(x.len()).ok_or(Error::SignalTooShort {
        len: x.len(),
        window: win_len,
    })?;
    let bins = cfg.bins();
    let window = cfg.window_function.coefficients(win_len);
    let fft = plan(win_len);
    let mut buf = vec![Complex::new(0.0f32, 0.0); win_len];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let seg = &x[f * hop..f * hop + win_len];
        for ((b, &s), &wv) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s * wv, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr().sqrt()));
    }
    Tensor::new(vec![frames, bins], out)
}

/// Magnitude of the DFT over the whole signal: `len / 2 + 1` bins.
pub fn full_dft_magnitude(w: &Waveform) -> Result<Tensor<f32>> {
    let x = w.samples();
    if x.is_empty() {
        return invalid("full_dft_magnitude needs a nonempty signal");
    }
    let fft = plan(x.len());
    let mut buf: Vec<Complex<f32>> = x.iter().map(|&s| Complex::new(s, 0.0)).collect();
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(&mut buf, &mut scratch);
    let bins = x.len() / 2 + 1;
    Ok(Tensor::vector(
        buf[..bins].iter().map(|c| c.norm_sqr().sqrt()).collect(),
    ))
}

/// The three input representations of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// 8 ms STFT magnitudes, `(frames, 65)`.
    pub spec_short: Tensor<f32>,
    /// 256 ms STFT magnitudes, `(frames, 2049)`.
    pub spec_long: Tensor<f32>,
    /// Whole-signal DFT magnitudes, `(len / 2 + 1)`.
    pub dft_mag: Tensor<f32>,
}

impl FeatureBundle {
    pub fn extract(w: &Waveform) -> Result<Self> {
        Ok(Self {
            spec_short: stft_magnitude(w, &StftConfig::short())?,
            spec_long: stft_magnitude(w, &StftConfig::long())?,
            dft_mag: full_dft_magnitude(w)?,
        })
    }
}
