use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::evalio::synth::SynthCorpus;
use crate::evalio::{read_external_manifest, read_manifest, ClipRecord, ExternalRecord, Split};
use crate::features::{read_wav, Waveform};
use crate::model::{Architecture, ModelInput};

/// A machine clip with its waveform and network input.
#[derive(Clone, Debug)]
pub struct Clip {
    pub record: ClipRecord,
    pub wave: Waveform,
    pub input: ModelInput,
}

/// An external-corpus clip.
#[derive(Clone, Debug)]
pub struct ExternalClip {
    pub id: String,
    /// First class tag in corpus order.
    pub class: String,
    pub wave: Waveform,
    pub input: ModelInput,
}

/// Everything a run reads: training and test clips plus the external pool.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Clip>,
    pub test: Vec<Clip>,
    pub external: Vec<ExternalClip>,
}

fn clip(record: ClipRecord, wave: Waveform, arch: &Architecture) -> Result<Clip> {
    let input = ModelInput::from_waveform(&wave, arch)?;
    Ok(Clip { record, wave, input })
}

fn external(record: &ExternalRecord, wave: Waveform, arch: &Architecture) -> Result<ExternalClip> {
    let input = ModelInput::from_waveform(&wave, arch)?;
    Ok(ExternalClip {
        id: record.clip_id().to_string(),
        class: record.external_class.first().unwrap_or_default().to_string(),
        wave,
        input,
    })
}

/// Reads the WAV files of `records`; paths are relative to `root`.
pub fn load_clips(records: &[ClipRecord], root: &Path, arch: &Architecture) -> Result<Vec<Clip>> {
    records
        .par_iter()
        .map(|r| clip(r.clone(), read_wav(&root.join(&r.path))?, arch))
        .collect()
}

pub fn load_external(records: &[ExternalRecord], root: &Path, arch: &Architecture) -> Result<Vec<ExternalClip>> {
    records
        .par_iter()
        .map(|r| external(r, read_wav(&root.join(&r.path))?, arch))
        .collect()
}

impl Corpus {
    /// Loads `train.jsonl` and `test.jsonl` from `data_root`, and the external
    /// manifest when given.
    pub fn load(data_root: &Path, external_manifest: Option<&Path>, arch: &Architecture) -> Result<Self> {
        let train_recs = read_manifest(&data_root.join("train.jsonl"))?;
        let test_recs = read_manifest(&data_root.join("test.jsonl"))?;
        if let Some(r) = train_recs.iter().find(|r| r.split != Split::Train) {
            return invalid(format!("`{}` in train.jsonl is not a training clip", r.id));
        }
        if let Some(r) = test_recs.iter().find(|r| r.split != Split::Test) {
            return invalid(format!("`{}` in test.jsonl is not a test clip", r.id));
        }
        let external = match external_manifest {
            Some(p) => {
                let recs = read_external_manifest(p)?;
                let root = p.parent().unwrap_or(Path::new("."));
                load_external(&recs, root, arch)?
            }
            None => Vec::new(),
        };
        Ok(Self {
            train: load_clips(&train_recs, data_root, arch)?,
            test: load_clips(&test_recs, data_root, arch)?,
            external,
        })
    }

    /// Uses an in-memory synthetic corpus directly.
    pub fn from_synth(s: &SynthCorpus, arch: &Architecture) -> Result<Self> {
        let conv = |v: &[crate::evalio::synth::SynthClip]| -> Result<Vec<Clip>> {
            v.par_iter()
                .map(|c| clip(c.record.clone(), c.wave.clone(), arch))
                .collect()
        };
        Ok(Self {
            train: conv(&s.train)?,
            test: conv(&s.test)?,
            external: s
                .external
                .par_iter()
                .map(|c| external(&c.record, c.wave.clone(), arch))
                .collect::<Result<_>>()?,
        })
    }

    /// Machine names of the training clips, sorted.
    pub fn machines(&self) -> Vec<String> {
        let mut m: Vec<String> = self.train.iter().map(|c| c.record.machine.clone()).collect();
        m.sort();
        m.dedup();
        m
    }
}
