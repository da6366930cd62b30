use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f32 = 32768.0;

fn to_pcm(v: f32) -> i16 {
    (v * FULL_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Rounds samples to what a PCM16 round trip would return.
pub fn quantize_pcm16(w: &Waveform) -> Waveform {
    Waveform::new(w.samples().iter().map(|&v| to_pcm(v) as f32 / FULL_SCALE).collect())
}

/// Writes PCM16 mono at 16 kHz.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: Waveform::SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in w.samples() {
        writer.write_sample(to_pcm(v)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Reads a PCM16 mono 16 kHz file; anything else is rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |reason: String| Error::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != Waveform::SAMPLE_RATE {
        return Err(wav_err(format!("{} Hz, expected 16000 Hz", spec.sample_rate)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "{}-bit {:?} samples, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    Ok(Waveform::new(samples))
}
