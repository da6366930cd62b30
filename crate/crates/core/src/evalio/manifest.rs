use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Anomalous,
    Unknown,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Anomalous => "anomalous",
            Condition::Unknown => "unknown",
        }
    }
}

/// One line of a dataset manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub path: String,
    pub machine: String,
    pub domain: Domain,
    pub split: Split,
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_class: Option<String>,
}

/// One or several class tags of an external clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tags {
    One(String),
    Many(Vec<String>),
}

impl Tags {
    /// The first tag in corpus order.
    pub fn first(&self) -> Option<&str> {
        match self {
            Tags::One(s) => Some(s),
            Tags::Many(v) => v.first().map(String::as_str),
        }
    }
}

/// One line of an external-corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub path: String,
    pub external_class: Tags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl ExternalRecord {
    /// Explicit id, or the path when none is given.
    pub fn clip_id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.path)
    }
}

/// Reads a JSONL file; blank lines are skipped and unknown fields ignored.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            what,
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a clip manifest and checks that training clips are all normal.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let recs: Vec<ClipRecord> = read_jsonl(path, "clip manifest")?;
    for (i, r) in recs.iter().enumerate() {
        if r.split == Split::Train && r.condition != Condition::Normal {
            return Err(Error::Manifest {
                what: "clip manifest",
                line: i + 1,
                reason: format!("training clip `{}` is not normal", r.id),
            });
        }
    }
    Ok(recs)
}

pub fn read_external_manifest(path: &Path) -> Result<Vec<ExternalRecord>> {
    let recs: Vec<ExternalRecord> = read_jsonl(path, "external manifest")?;
    for (i, r) in recs.iter().enumerate() {
        if r.external_class.first().is_none() {
            return Err(Error::Manifest {
                what: "external manifest",
                line: i + 1,
                reason: format!("`{}` has no class tag", r.path),
            });
        }
    }
    Ok(recs)
}
