//! Deterministic synthetic machine-sound corpus.
//!
//! Normal clips are harmonic stacks at a machine-specific fundamental, shaped
//! by a hidden attribute (pitch offset, amplitude-modulation rate and
//! spectral tilt) and
//! mixed with colored noise whose color and level depend on the domain.
//! Anomalies detune the whole stack and may add transients. The external pool
//! mixes unrelated tones, noise and chirps with near-machine harmonic stacks.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{write_jsonl, ClipRecord, Condition, Domain, ExternalRecord, Split, Tags};
use crate::error::{invalid, Result};
use crate::features::{quantize_pcm16, write_wav, Waveform};

/// Class tag of near-machine external clips.
pub const NEAR_MACHINE_CLASS: &str = "/m/machinery";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    /// Amplitude-modulation rate in Hz.
    pub am_rate: f64,
    /// Partial `k` has amplitude `k^-tilt`.
    pub tilt: f64,
    /// Relative offset of the fundamental from the machine's `f0`.
    #[serde(default)]
    pub pitch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub name: String,
    pub f0: f64,
    pub attributes: Vec<AttributeSpec>,
}

/// One-pole colored noise `y[n] = color * y[n-1] + w[n]`, scaled to `level`
/// times the harmonic RMS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub color: f64,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalSpec {
    pub size: usize,
    pub near_machine_fraction: f64,
    /// Relative fundamental offset of near-machine clips, drawn from this range with a random sign.
    pub near_offset: [f64; 2],
}

impl Default for ExternalSpec {
    fn default() -> Self {
        Self {
            size: 400,
            near_machine_fraction: 0.125,
            near_offset: [0.02, 0.05],
        }
    }
}

impl ExternalSpec {
    pub fn near_machine_count(&self) -> usize {
        (self.size as f64 * self.near_machine_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub machines: Vec<MachineSpec>,
    pub clip_secs: f64,
    pub harmonics: usize,
    pub am_depth: f64,
    /// Relative fundamental jitter of normal clips.
    pub jitter: f64,
    pub train_source: usize,
    pub train_target: usize,
    /// Test clips per domain and condition.
    pub test_per_condition: usize,
    pub source_noise: NoiseSpec,
    pub target_noise: NoiseSpec,
    /// Relative detune of anomalous clips.
    pub detune: f64,
    /// Probability that an anomalous clip also carries transients.
    pub transient_prob: f64,
    pub external: ExternalSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let machine = |name: &str, f0: f64, rate: f64| MachineSpec {
            name: name.into(),
            f0,
            attributes: (0..3)
                .map(|a| AttributeSpec {
                    name: format!("att{a}"),
                    am_rate: rate * (1.0 + a as f64),
                    tilt: 0.6 + 0.5 * a as f64,
                    pitch: 0.03 * (a as f64 - 1.0),
                })
                .collect(),
        };
        Self {
            machines: vec![
                machine("fan", 110.0, 1.5),
                machine("gearbox", 170.0, 2.0),
                machine("pump", 260.0, 1.2),
                machine("valve", 390.0, 2.5),
            ],
            clip_secs: 6.0,
            harmonics: 6,
            am_depth: 0.5,
            jitter: 0.005,
            train_source: 110,
            train_target: 10,
            test_per_condition: 10,
            source_noise: NoiseSpec { color: 0.9, level: 0.5 },
            target_noise: NoiseSpec {
                color: -0.3,
                level: 0.8,
            },
            detune: 0.025,
            transient_prob: 0.2,
            external: ExternalSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.machines.len() < 2 {
            return invalid(format!(
                "synthetic corpus needs at least 2 machines for triplets, got {}",
                self.machines.len()
            ));
        }
        for m in &self.machines {
            if m.attributes.len() < 2 {
                return invalid(format!("machine `{}` needs at least 2 attributes", m.name));
            }
            if let Some(a) = m.attributes.iter().find(|a| !(a.pitch.abs() < 0.2)) {
                return invalid(format!(
                    "attribute `{}` of `{}`: pitch offset {} outside ±0.2",
                    a.name, m.name, a.pitch
                ));
            }
            if !(m.f0 > 0.0) || m.f0 * self.harmonics as f64 * (1.0 + self.detune.abs() + 0.2) >= 8000.0 {
                return invalid(format!("machine `{}` fundamental {} Hz out of range", m.name, m.f0));
            }
        }
        let mut names: Vec<&str> = self.machines.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return invalid("machine names must be unique");
        }
        if !(6.0..=18.0).contains(&self.clip_secs) {
            return invalid(format!("clip length {} s outside 6..18 s", self.clip_secs));
        }
        if self.harmonics == 0 || self.train_source == 0 || self.train_target == 0 || self.test_per_condition == 0 {
            return invalid("harmonics and clip counts must be positive");
        }
        for (what, v) in [
            ("am_depth", self.am_depth),
            ("jitter", self.jitter),
            ("transient_prob", self.transient_prob),
            ("external.near_machine_fraction", self.external.near_machine_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{what} = {v} outside [0, 1]"));
            }
        }
        if !(self.detune > self.jitter && self.detune < 0.5) {
            return invalid(format!(
                "detune {} must exceed jitter {} and stay below 0.5",
                self.detune, self.jitter
            ));
        }
        for n in [self.source_noise, self.target_noise] {
            if !(n.color.abs() < 1.0 && n.level >= 0.0) {
                return invalid(format!("noise color {} / level {} invalid", n.color, n.level));
            }
        }
        let [lo, hi] = self.external.near_offset;
        if !(0.0 <= lo && lo <= hi && hi < 0.5) {
            return invalid(format!("near_offset [{lo}, {hi}] invalid"));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        (self.clip_secs * Waveform::SAMPLE_RATE as f64).round() as usize
    }
}

/// Ground truth of an anomalous clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInfo {
    /// Signed relative detune of the fundamental.
    pub detune: f64,
    pub transients: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub wave: Waveform,
    /// Fundamental actually synthesized.
    pub f0: f64,
    pub anomaly: Option<AnomalyInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExternal {
    pub record: ExternalRecord,
    pub wave: Waveform,
    pub near_machine: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<SynthClip>,
    pub test: Vec<SynthClip>,
    pub external: Vec<SynthExternal>,
}

/// File counts of a written corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub machines: usize,
    pub train: usize,
    pub test: usize,
    pub external: usize,
    pub near_machine: usize,
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} machines: {} train, {} test, {} external ({} near-machine)",
            self.machines, self.train, self.test, self.external, self.near_machine
        )
    }
}

struct ClipPlan {
    record: ClipRecord,
    machine: usize,
    attribute: usize,
    anomalous: bool,
}

fn clip_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn colored_noise(rng: &mut impl Rng, n: usize, color: f64) -> Vec<f64> {
    let mut y = 0.0;
    (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            y = color * y + w;
            y
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn scale_to(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
}

fn harmonic_stack(
    rng: &mut impl Rng,
    n: usize,
    f0: f64,
    harmonics: usize,
    attr: &AttributeSpec,
    depth: f64,
) -> Vec<f64> {
    let sr = Waveform::SAMPLE_RATE as f64;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let mut out = vec![0.0; n];
    for (k, &ph) in phases.iter().enumerate() {
        let amp = ((k + 1) as f64).powf(-attr.tilt);
        let w = 2.0 * PI * f0 * (k + 1) as f64 / sr;
        for (i, o) in out.iter_mut().enumerate() {
            *o += amp * (w * i as f64 + ph).sin();
        }
    }
    let wa = 2.0 * PI * attr.am_rate / sr;
    for (i, o) in out.iter_mut().enumerate() {
        *o *= 1.0 + depth * (wa * i as f64 + am_phase).sin();
    }
    scale_to(&mut out, 1.0);
    out
}

fn add_transients(rng: &mut impl Rng, x: &mut [f64]) {
    let sr = Waveform::SAMPLE_RATE as f64;
    let len = (0.02 * sr) as usize;
    let count = 6;
    let amp = 3.0 * rms(x);
    for _ in 0..count {
        let start = rng.gen_range(0..x.len().saturating_sub(len).max(1));
        for (j, v) in x[start..].iter_mut().take(len).enumerate() {
            let w: f64 = rng.sample(StandardNormal);
            *v += amp * w * (-(j as f64) / (len as f64 / 5.0)).exp();
        }
    }
}

/// Scales to an RMS of 0.1, clips to [-1, 1] and quantizes to PCM16 levels.
fn finish(mut x: Vec<f64>) -> Waveform {
    scale_to(&mut x, 0.1);
    quantize_pcm16(&Waveform::new(x.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect()))
}

fn render_clip(spec: &SynthSpec, plan: &ClipPlan, seed: u64, stream: u64) -> SynthClip {
    let mut rng = clip_rng(seed, stream);
    let m = &spec.machines[plan.machine];
    let attr = &m.attributes[plan.attribute];
    let n = spec.samples();
    let base = m.f0 * (1.0 + attr.pitch);
    let jitter = rng.gen_range(-spec.jitter..=spec.jitter);
    let (f0, anomaly) = if plan.anomalous {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let transients = rng.gen_bool(spec.transient_prob);
        (
            base * (1.0 + sign * spec.detune),
            Some(AnomalyInfo {
                detune: sign * spec.detune,
                transients,
            }),
        )
    } else {
        (base * (1.0 + jitter), None)
    };
    let mut x = harmonic_stack(&mut rng, n, f0, spec.harmonics, attr, spec.am_depth);
    let noise = match plan.record.domain {
        Domain::Source => spec.source_noise,
        Domain::Target => spec.target_noise,
    };
    let mut nz = colored_noise(&mut rng, n, noise.color);
    scale_to(&mut nz, noise.level);
    x.iter_mut().zip(&nz).for_each(|(a, b)| *a += b);
    if anomaly.is_some_and(|a| a.transients) {
        add_transients(&mut rng, &mut x);
    }
    SynthClip {
        record: plan.record.clone(),
        wave: finish(x),
        f0,
        anomaly,
    }
}

fn render_external(spec: &SynthSpec, idx: usize, near: Option<usize>, seed: u64, stream: u64) -> SynthExternal {
    let mut rng = clip_rng(seed, stream);
    let n = spec.samples();
    let sr = Waveform::SAMPLE_RATE as f64;
    let (x, class) = match near {
        Some(mi) => {
            let m = &spec.machines[mi];
            let attr = &m.attributes[rng.gen_range(0..m.attributes.len())];
            let [lo, hi] = spec.external.near_offset;
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let f0 = m.f0 * (1.0 + attr.pitch) * (1.0 + sign * rng.gen_range(lo..=hi));
            let mut x = harmonic_stack(&mut rng, n, f0, spec.harmonics, attr, spec.am_depth);
            let noise = spec.source_noise;
            let mut nz = colored_noise(&mut rng, n, noise.color);
            scale_to(&mut nz, noise.level);
            x.iter_mut().zip(&nz).for_each(|(a, b)| *a += b);
            (x, NEAR_MACHINE_CLASS)
        }
        None => match rng.gen_range(0..3) {
            0 => {
                let tones = rng.gen_range(1..=3);
                let parts: Vec<(f64, f64)> = (0..tones)
                    .map(|_| (rng.gen_range(80.0..4000.0), rng.gen_range(0.0..2.0 * PI)))
                    .collect();
                let x = (0..n)
                    .map(|i| {
                        parts
                            .iter()
                            .map(|(f, p)| (2.0 * PI * f * i as f64 / sr + p).sin())
                            .sum()
                    })
                    .collect();
                (x, "/m/tone")
            }
            1 => {
                let color = rng.gen_range(-0.9..0.99);
                (colored_noise(&mut rng, n, color), "/m/noise")
            }
            _ => {
                let f_start: f64 = rng.gen_range(100.0..2000.0);
                let f_end: f64 = rng.gen_range(100.0..4000.0);
                let dur = n as f64 / sr;
                let x = (0..n)
                    .map(|i| {
                        let t = i as f64 / sr;
                        (2.0 * PI * (f_start * t + 0.5 * (f_end - f_start) / dur * t * t)).sin()
                    })
                    .collect();
                (x, "/m/chirp")
            }
        },
    };
    let id = format!("ext_{idx:04}");
    SynthExternal {
        record: ExternalRecord {
            path: format!("external/{id}.wav"),
            external_class: Tags::One(class.to_string()),
            id: Some(id),
        },
        wave: finish(x),
        near_machine: near.is_some(),
    }
}

fn clip_plans(spec: &SynthSpec) -> (Vec<ClipPlan>, Vec<ClipPlan>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (mi, m) in spec.machines.iter().enumerate() {
        let n_attr = m.attributes.len();
        let push = |out: &mut Vec<ClipPlan>, split: Split, domain: Domain, cond: Condition, count: usize| {
            for i in 0..count {
                let a = i % n_attr;
                let split_s = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                let id = format!("{}_{split_s}_{}_{}_{i:04}", m.name, domain.as_str(), cond.as_str());
                out.push(ClipPlan {
                    record: ClipRecord {
                        path: format!("{split_s}/{id}.wav"),
                        id,
                        machine: m.name.clone(),
                        domain,
                        split,
                        condition: cond,
                        attribute: Some(m.attributes[a].name.clone()),
                        external_class: None,
                    },
                    machine: mi,
                    attribute: a,
                    anomalous: cond == Condition::Anomalous,
                });
            }
        };
        push(
            &mut train,
            Split::Train,
            Domain::Source,
            Condition::Normal,
            spec.train_source,
        );
        push(
            &mut train,
            Split::Train,
            Domain::Target,
            Condition::Normal,
            spec.train_target,
        );
        for d in [Domain::Source, Domain::Target] {
            for c in [Condition::Normal, Condition::Anomalous] {
                push(&mut test, Split::Test, d, c, spec.test_per_condition);
            }
        }
    }
    (train, test)
}

/// Renders the whole corpus in memory. Output depends only on `spec` and `seed`.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let (train_plans, test_plans) = clip_plans(spec);
    let n_train = train_plans.len() as u64;
    let n_test = test_plans.len() as u64;
    let train = train_plans
        .par_iter()
        .enumerate()
        .map(|(i, p)| render_clip(spec, p, seed, i as u64))
        .collect();
    let test = test_plans
        .par_iter()
        .enumerate()
        .map(|(i, p)| render_clip(spec, p, seed, n_train + i as u64))
        .collect();
    // near-machine clips are spread evenly over the pool and the machines
    let size = spec.external.size;
    let n_near = spec.external.near_machine_count().min(size);
    let near_at = |idx: usize| -> Option<usize> {
        if n_near == 0 {
            return None;
        }
        let slot = idx * n_near / size;
        let is_near = (idx + 1) * n_near / size > slot;
        is_near.then_some(slot % spec.machines.len())
    };
    let external = (0..size)
        .into_par_iter()
        .map(|i| render_external(spec, i, near_at(i), seed, n_train + n_test + i as u64))
        .collect();
    Ok(SynthCorpus { train, test, external })
}

/// Writes `train.jsonl`, `test.jsonl`, `external.jsonl` and the WAV files under `out`.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64, out: &Path) -> Result<CorpusSummary> {
    let corpus = synthesize(spec, seed)?;
    for sub in ["train", "test", "external"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    corpus
        .train
        .par_iter()
        .chain(corpus.test.par_iter())
        .try_for_each(|c| write_wav(&out.join(&c.record.path), &c.wave))?;
    corpus
        .external
        .par_iter()
        .try_for_each(|c| write_wav(&out.join(&c.record.path), &c.wave))?;
    let records = |v: &[SynthClip]| v.iter().map(|c| c.record.clone()).collect::<Vec<_>>();
    write_jsonl(&out.join("train.jsonl"), &records(&corpus.train))?;
    write_jsonl(&out.join("test.jsonl"), &records(&corpus.test))?;
    let ext: Vec<ExternalRecord> = corpus.external.iter().map(|c| c.record.clone()).collect();
    write_jsonl(&out.join("external.jsonl"), &ext)?;
    Ok(CorpusSummary {
        machines: spec.machines.len(),
        train: corpus.train.len(),
        test: corpus.test.len(),
        external: corpus.external.len(),
        near_machine: corpus.external.iter().filter(|c| c.near_machine).count(),
    })
}
