//! Waveform augmentations used to build triplets and mixup pairs.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{invalid, Result};

fn l2(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Factor applied to the noise clip: `10^(-alpha/20) * |anchor| / |noise|`.
pub fn snr_noise_scale(anchor_norm: f64, noise_norm: f64, alpha_db: f64) -> f64 {
    10f64.powf(-alpha_db / 20.0) * anchor_norm / noise_norm
}

/// Noise clip tiled and cropped to `len` samples.
pub fn fit_length(noise: &[f32], len: usize) -> Vec<f32> {
    noise.iter().copied().cycle().take(len).collect()
}

/// Adds `noise` to `anchor` at a signal-to-noise ratio of `alpha_db`.
///
/// The noise is tiled or cropped to the anchor length first. A silent
/// anchor is returned unchanged.
pub fn snr_mix(anchor: &Waveform, noise: &Waveform, alpha_db: f64) -> Result<Waveform> {
    if anchor.is_empty() || noise.is_empty() {
        return invalid("snr_mix needs nonempty anchor and noise");
    }
    if !alpha_db.is_finite() {
        return invalid(format!("snr {alpha_db} dB is not finite"));
    }
    let noise = fit_length(noise.samples(), anchor.len());
    let noise_norm = l2(&noise);
    if noise_norm == 0.0 {
        return invalid("noise clip has zero norm");
    }
    let anchor_norm = l2(anchor.samples());
    if anchor_norm == 0.0 {
        return Ok(anchor.clone());
    }
    let k = snr_noise_scale(anchor_norm, noise_norm, alpha_db);
    Ok(Waveform::new(
        anchor
            .samples()
            .iter()
            .zip(&noise)
            .map(|(&a, &n)| (a as f64 + k * n as f64) as f32)
            .collect(),
    ))
}

/// Convex combination of two clips and their label vectors.
pub fn mixup(x1: &Waveform, l1: &[f32], x2: &Waveform, l2: &[f32], lambda: f64) -> Result<(Waveform, Vec<f32>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("mixup ratio {lambda} outside [0, 1]"));
    }
    if x1.len() != x2.len() {
        return invalid(format!("mixup length mismatch: {} vs {}", x1.len(), x2.len()));
    }
    if l1.len() != l2.len() {
        return invalid(format!("mixup label dims differ: {} vs {}", l1.len(), l2.len()));
    }
    let mix = |a: f32, b: f32| (lambda * a as f64 + (1.0 - lambda) * b as f64) as f32;
    let w = x1
        .samples()
        .iter()
        .zip(x2.samples())
        .map(|(&a, &b)| mix(a, b))
        .collect();
    let l = l1.iter().zip(l2).map(|(&a, &b)| mix(a, b)).collect();
    Ok((Waveform::new(w), l))
}

/// Phase-vocoder settings for [`pitch_shift`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self { n_fft: 1024, hop: 256 }
    }
}

pub const MAX_SEMITONES: f64 = 24.0;

/// Shifts pitch by `semitones` while keeping the length.
///
/// Time-stretches by `2^(s/12)` with a phase vocoder, then resamples back
/// to the original length.
pub fn pitch_shift(w: &Waveform, semitones: f64) -> Result<Waveform> {
    pitch_shift_with(w, semitones, &VocoderConfig::default())
}

pub fn pitch_shift_with(w: &Waveform, semitones: f64, cfg: &VocoderConfig) -> Result<Waveform> {
    if w.is_empty() {
        return invalid("pitch_shift needs a nonempty signal");
    }
    if !semitones.is_finite() || semitones.abs() > MAX_SEMITONES {
        return invalid(format!("pitch shift of {semitones} semitones outside ±{MAX_SEMITONES}"));
    }
    let factor = 2f64.powf(semitones / 12.0);
    let stretched_len = ((w.len() as f64) * factor).round().max(1.0) as usize;
    let stretched = time_stretch(w.samples(), 1.0 / factor, stretched_len, cfg);
    Ok(Waveform::new(resample(&stretched, factor, w.len())))
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(x: &[f32], i: isize) -> f32 {
    let n = x.len() as isize;
    if n == 1 {
        return x[0];
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    x[j as usize]
}

thread_local! {
    static REAL_PLANNER: RefCell<RealFftPlanner<f32>> = RefCell::new(RealFftPlanner::new());
}

fn real_plans(n: usize) -> (Arc<dyn RealToComplex<f32>>, Arc<dyn ComplexToReal<f32>>) {
    REAL_PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Phase-vocoder time stretch; `rate < 1` lengthens the signal.
fn time_stretch(x: &[f32], rate: f64, out_len: usize, cfg: &VocoderConfig) -> Vec<f32> {
    let n_fft = cfg.n_fft;
    let hop = cfg.hop;
    let bins = n_fft / 2 + 1;
    let window: Vec<f32> = hann(n_fft).into_iter().map(|v| v as f32).collect();
    let (fwd, inv) = real_plans(n_fft);
    let mut frame = fwd.make_input_vec();
    let mut spectrum = fwd.make_output_vec();
    let mut scratch = vec![Complex::new(0.0, 0.0); fwd.get_scratch_len().max(inv.get_scratch_len())];

    // Centered analysis frames with reflect padding, stored as magnitudes and
    // unit phasors; two trailing silent frames close the interpolation.
    let pad = n_fft / 2;
    let frames = 1 + x.len() / hop;
    let mut mags = Vec::with_capacity((frames + 2) * bins);
    let mut units = Vec::with_capacity((frames + 2) * bins);
    for f in 0..frames {
        let start = f * hop;
        if start >= pad && start - pad + n_fft <= x.len() {
            let seg = &x[start - pad..start - pad + n_fft];
            for ((b, &v), w) in frame.iter_mut().zip(seg).zip(&window) {
                *b = v * w;
            }
        } else {
            for (i, b) in frame.iter_mut().enumerate() {
                *b = reflect(x, (start + i) as isize - pad as isize) * window[i];
            }
        }
        fwd.process_with_scratch(&mut frame, &mut spectrum, &mut scratch)
            .expect("buffer sizes come from the plan");
        for &c in &spectrum {
            let m = c.norm_sqr().sqrt();
            mags.push(m);
            units.push(if m > 0.0 { c / m } else { Complex::new(1.0, 0.0) });
        }
    }
    mags.resize((frames + 2) * bins, 0.0);
    units.resize((frames + 2) * bins, Complex::new(1.0, 0.0));

    // Synthesis: the phase advances by u1 * conj(u0) between neighbouring
    // analysis frames, which equals exp(i * (expected advance + wrapped deviation)).
    let steps = (0..)
        .map(|i| i as f64 * rate)
        .take_while(|&t| t < frames as f64)
        .count();
    let total = n_fft + hop * steps.saturating_sub(1);
    let mut acc = vec![0.0f32; total];
    let mut wsum = vec![0.0f32; total];
    let mut phase = units[..bins].to_vec();
    for s in 0..steps {
        let t = s as f64 * rate;
        let i0 = t.floor() as usize;
        let frac = (t - i0 as f64) as f32;
        let (m0, m1) = (
            &mags[i0 * bins..(i0 + 1) * bins],
            &mags[(i0 + 1) * bins..(i0 + 2) * bins],
        );
        let (u0, u1) = (
            &units[i0 * bins..(i0 + 1) * bins],
            &units[(i0 + 1) * bins..(i0 + 2) * bins],
        );
        for k in 0..bins {
            let mag = frac * m1[k] + (1.0 - frac) * m0[k];
            spectrum[k] = phase[k] * mag;
            phase[k] = phase[k] * u1[k] * u0[k].conj();
        }
        // the imaginary parts at DC and Nyquist only reach the discarded imaginary output
        spectrum[0].im = 0.0;
        spectrum[bins - 1].im = 0.0;
        inv.process_with_scratch(&mut spectrum, &mut frame, &mut scratch)
            .expect("buffer sizes come from the plan");
        let off = s * hop;
        for i in 0..n_fft {
            acc[off + i] += frame[i] / n_fft as f32 * window[i];
            wsum[off + i] += window[i] * window[i];
        }
    }
    (0..out_len)
        .map(|i| {
            let j = i + pad;
            if j < total && wsum[j] > 1e-11 {
                acc[j] / wsum[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Band-limited resampling: output sample `i` reads the input at `i * step`.
///
/// Hann-windowed sinc with 6 zero crossings and a 0.99 rolloff; `step > 1`
/// compresses (raising pitch) and lowers the cutoff to `0.99 / step`. Read
/// positions are rounded to 1/1024 of a sample and use a precomputed
/// polyphase filter bank.
fn resample(x: &[f32], step: f64, out_len: usize) -> Vec<f32> {
    const ZEROS: f64 = 6.0;
    const ROLLOFF: f64 = 0.99;
    const PHASES: usize = 1024;
    let cutoff = ROLLOFF * (1.0 / step).min(1.0);
    let half = ZEROS / cutoff;
    let kernel = |d: f64| {
        if d.abs() > half {
            return 0.0;
        }
        let arg = PI * cutoff * d;
        let sinc = if arg == 0.0 { 1.0 } else { arg.sin() / arg };
        cutoff * sinc * (0.5 + 0.5 * (PI * d / half).cos())
    };
    // Phase p covers read positions base + p / PHASES; tap m sits at input
    // index base + m - reach.
    let reach = half.ceil() as usize;
    let taps = 2 * reach + 1;
    let bank: Vec<f32> = (0..PHASES)
        .flat_map(|p| {
            let frac = p as f64 / PHASES as f64;
            (0..taps).map(move |m| kernel(frac + reach as f64 - m as f64) as f32)
        })
        .collect();
    (0..out_len)
        .map(|i| {
            let pos = (i as f64 * step * PHASES as f64).round() as usize;
            let (base, p) = (pos / PHASES, pos % PHASES);
            let w = &bank[p * taps..(p + 1) * taps];
            if base >= reach && base + reach < x.len() {
                let seg = &x[base - reach..base + reach + 1];
                seg.iter().zip(w).map(|(&a, &b)| a * b).sum()
            } else {
                (0..taps)
                    .filter_map(|m| (base + m).checked_sub(reach).and_then(|j| x.get(j)).map(|&a| a * w[m]))
                    .sum()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::full_dft_magnitude;

    fn tone(freq: f64, len: usize) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin()) as f32)
                .collect(),
        )
    }

    fn peak_bin(w: &Waveform) -> usize {
        let d = full_dft_magnitude(w).unwrap();
        d.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    }

    #[test]
    fn zero_db_equal_norms_adds_noise_verbatim() {
        let a = Waveform::new(vec![1.0, 0.0, -1.0, 0.0]);
        let n = Waveform::new(vec![0.0, 1.0, 0.0, -1.0]);
        let out = snr_mix(&a, &n, 0.0).unwrap();
        assert_eq!(out.samples(), &[1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn twenty_db_gives_tenth_of_anchor_norm() {
        let a = Waveform::new(vec![0.3, -0.2, 0.5, 0.1]);
        let n = Waveform::new(vec![1.0, 1.0, -1.0, 2.0]);
        let out = snr_mix(&a, &n, 20.0).unwrap();
        let scaled: Vec<f32> = out.samples().iter().zip(a.samples()).map(|(o, a)| o - a).collect();
        assert!((l2(&scaled) - 0.1 * l2(a.samples())).abs() < 1e-6);
    }

    #[test]
    fn noise_scale_formula() {
        let k = snr_noise_scale(2.0, 4.0, 6.0);
        assert!((k - 10f64.powf(-0.3) * 0.5).abs() < 1e-15);
        assert!((k - 0.25059).abs() < 1e-5);
    }

    #[test]
    fn snr_mix_edge_cases() {
        let a = Waveform::new(vec![0.0; 4]);
        let n = Waveform::new(vec![1.0; 3]);
        assert_eq!(snr_mix(&a, &n, 5.0).unwrap(), a);
        let z = Waveform::new(vec![0.0; 4]);
        assert!(snr_mix(&n, &z, 5.0).is_err());
        assert_eq!(fit_length(&[1.0, 2.0], 5), vec![1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn mixup_endpoints_and_symmetry() {
        let x1 = Waveform::new(vec![1.0, 2.0]);
        let x2 = Waveform::new(vec![-1.0, 4.0]);
        let (l1, l2) = ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let (w, l) = mixup(&x1, &l1, &x2, &l2, 1.0).unwrap();
        assert_eq!((w, l), (x1.clone(), l1.to_vec()));
        let a = mixup(&x1, &l1, &x2, &l2, 0.5).unwrap();
        let b = mixup(&x2, &l2, &x1, &l1, 0.5).unwrap();
        assert_eq!(a, b);
        let (_, l) = mixup(&x1, &l1, &x2, &l2, 0.3).unwrap();
        assert!((l.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(mixup(&x1, &l1, &x2, &l2, 1.5).is_err());
        assert!(mixup(&x1, &l1, &Waveform::new(vec![0.0]), &l2, 0.5).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let w = tone(440.0, 4000);
        let out = pitch_shift(&w, 0.0).unwrap();
        let err: f64 = out
            .samples()
            .iter()
            .zip(w.samples())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert!(err.sqrt() / l2(w.samples()) < 1e-2);
    }

    #[test]
    fn octave_up_and_down_move_peak() {
        let w = tone(440.0, 16000);
        let up = pitch_shift(&w, 12.0).unwrap();
        assert_eq!(up.len(), w.len());
        assert!((peak_bin(&up) as i64 - 880).abs() <= 1);
        let down = pitch_shift(&w, -12.0).unwrap();
        assert_eq!(down.len(), w.len());
        assert!((peak_bin(&down) as i64 - 220).abs() <= 1);
    }

    #[test]
    fn shift_preconditions() {
        assert!(pitch_shift(&Waveform::new(vec![]), 3.0).is_err());
        assert!(pitch_shift(&tone(100.0, 100), 30.0).is_err());
    }
}
