//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `ASDCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then every
//! tensor as raw little-endian `f32` in header order. Reloading is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::cluster::RepresentativeSet;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelState, RunningStats};

const MAGIC: &[u8; 8] = b"ASDCKPT\0";
const VERSION: u32 = 1;

/// A trained model with its class names and per-machine representatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub classes: Vec<String>,
    pub representatives: Vec<RepresentativeSet>,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RepEntry {
    machine: String,
    source: usize,
    target: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    class_count: usize,
    classes: Vec<String>,
    scales: [f64; 4],
    seed: u64,
    stage: u32,
    step_count: u64,
    config_hash: String,
    tensors: Vec<TensorEntry>,
    representatives: Vec<RepEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Representatives of `machine`.
    pub fn reps_for(&self, machine: &str) -> Result<&RepresentativeSet> {
        self.representatives
            .iter()
            .find(|r| r.machine == machine && !r.is_empty())
            .ok_or_else(|| Error::MissingRepresentatives(machine.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut tensors: Vec<(String, &[f32], Vec<usize>)> = Vec::new();
        for (name, p) in m.params.iter() {
            let (mo, ve) = m
                .params
                .moments(name)
                .ok_or_else(|| bad(format!("no moments for `{name}`")))?;
            tensors.push((format!("param/{name}"), p.data(), p.shape().to_vec()));
            tensors.push((format!("adam_m/{name}"), mo.data(), mo.shape().to_vec()));
            tensors.push((format!("adam_v/{name}"), ve.data(), ve.shape().to_vec()));
        }
        tensors.push((
            "fixed_centers".into(),
            m.fixed_centers.data(),
            m.fixed_centers.shape().to_vec(),
        ));
        for (key, r) in &m.running {
            tensors.push((format!("bn_mean/{key}"), &r.mean, vec![r.mean.len()]));
            tensors.push((format!("bn_var/{key}"), &r.var, vec![r.var.len()]));
        }
        let mut reps = Vec::new();
        let mut rep_rows: Vec<&[f32]> = Vec::new();
        for r in &self.representatives {
            let dim = r.iter().next().map_or(0, Vec::len);
            if r.iter().any(|v| v.len() != dim) {
                return Err(bad(format!("representatives of `{}` differ in dimension", r.machine)));
            }
            reps.push(RepEntry {
                machine: r.machine.clone(),
                source: r.source.len(),
                target: r.target.len(),
                dim,
            });
            rep_rows.extend(r.iter().map(Vec::as_slice));
        }
        let header = Header {
            arch: m.arch.clone(),
            class_count: m.class_count,
            classes: self.classes.clone(),
            scales: m.scales,
            seed: m.seed,
            stage: m.stage,
            step_count: m.params.step_count(),
            config_hash: self.config_hash.clone(),
            tensors: tensors
                .iter()
                .map(|(n, _, s)| TensorEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
            representatives: reps,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in tensors
            .iter()
            .flat_map(|t| t.1.iter())
            .chain(rep_rows.into_iter().flatten())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("format version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut blob = Blob {
            data: &body[hlen..],
            pos: 0,
        };

        let mut named: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            named.insert(t.name.clone(), Tensor::new(t.shape.clone(), blob.take(n)?)?);
        }
        let mut take = |name: &str| {
            named
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor `{name}`")))
        };
        let param_names: Vec<String> = header
            .tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix("param/").map(str::to_string))
            .collect();
        let mut entries = Vec::with_capacity(param_names.len());
        for name in &param_names {
            entries.push((
                name.clone(),
                take(&format!("param/{name}"))?,
                take(&format!("adam_m/{name}"))?,
                take(&format!("adam_v/{name}"))?,
            ));
        }
        let params = ParamStore::from_parts(entries, header.step_count)?;
        let fixed_centers = take("fixed_centers")?;
        let bn_keys: Vec<String> = header
            .tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix("bn_mean/").map(str::to_string))
            .collect();
        let mut running = BTreeMap::new();
        for key in bn_keys {
            let mean = take(&format!("bn_mean/{key}"))?.into_data();
            let var = take(&format!("bn_var/{key}"))?.into_data();
            running.insert(key, RunningStats { mean, var });
        }
        let mut representatives = Vec::with_capacity(header.representatives.len());
        for r in &header.representatives {
            let mut rows = |count: usize| -> Result<Vec<Vec<f32>>> { (0..count).map(|_| blob.take(r.dim)).collect() };
            let source = rows(r.source)?;
            let target = rows(r.target)?;
            representatives.push(RepresentativeSet {
                machine: r.machine.clone(),
                source,
                target,
            });
        }
        if blob.pos != blob.data.len() {
            return Err(bad(format!("{} trailing bytes", blob.data.len() - blob.pos)));
        }
        let model = ModelState {
            arch: header.arch,
            class_count: header.class_count,
            params,
            fixed_centers,
            running,
            scales: header.scales,
            seed: header.seed,
            stage: header.stage,
        };
        model.arch.validate()?;
        Ok(Self {
            model,
            classes: header.classes,
            representatives,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Blob<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Blob<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f32>> {
        let end = self.pos + 4 * n;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| bad("truncated tensor data"))?;
        self.pos = end;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{adamw_step, AdamW};
    use crate::model::init_model;

    fn sample() -> Checkpoint {
        let arch = Architecture::with_grids(&[4, 8], [8, 8], [4, 16], 32);
        let mut model = init_model(9, 3, &arch).unwrap();
        let grads = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.map(|x| x * 0.5 + 0.1)))
            .collect();
        adamw_step(&mut model.params, &grads, &AdamW::default()).unwrap();
        model.stage = 2;
        Checkpoint {
            model,
            classes: vec!["fan".into(), "pump".into(), "valve_/m/x".into()],
            representatives: vec![RepresentativeSet {
                machine: "fan".into(),
                source: vec![vec![0.1, -0.2, f32::MIN_POSITIVE], vec![1.0, 2.0, 3.0]],
                target: vec![vec![1e-30, 7.0, -0.0]],
            }],
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
        assert!(back.reps_for("fan").is_ok());
        assert!(matches!(back.reps_for("pump"), Err(Error::MissingRepresentatives(m)) if m == "pump"));
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        let mut longer = bytes;
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
