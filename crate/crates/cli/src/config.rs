use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asd_core::evalio::SynthSpec;
use asd_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding `train.jsonl` and `test.jsonl`.
    pub data_root: PathBuf,
    /// Directory holding `external.jsonl`; no external pool when absent.
    pub external_root: Option<PathBuf>,
    /// Stage directories are written here.
    pub output_root: PathBuf,
}

/// Contents of a run config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub pipeline: PipelineConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of stages M_max.
    #[arg(long)]
    pub stages: Option<u32>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_triplet: bool,
    #[arg(long)]
    pub no_pseudo: bool,
    #[arg(long)]
    pub no_external: bool,
    #[arg(long)]
    pub random_selection: bool,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads a TOML config; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.data_root = resolve(base, &cfg.paths.data_root);
        cfg.paths.output_root = resolve(base, &cfg.paths.output_root);
        cfg.paths.external_root = cfg.paths.external_root.map(|p| resolve(base, &p));
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let p = &mut self.pipeline;
        if let Some(s) = o.seed {
            p.seed = s;
        }
        if let Some(s) = o.stages {
            p.stages = s;
        }
        if let Some(n) = o.n_max {
            p.selection.n_max = n;
        }
        if let Some(e) = o.epochs {
            p.train.epochs = e;
        }
        p.use_triplet &= !o.no_triplet;
        p.use_pseudo &= !o.no_pseudo;
        p.use_external &= !o.no_external;
        p.selection.random_baseline |= o.random_selection;
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.pipeline.use_external && self.pipeline.stages > 1 && self.paths.external_root.is_none() {
            bail!("use_external needs paths.external_root (or pass --no-external)");
        }
        Ok(())
    }

    pub fn external_manifest(&self) -> Option<PathBuf> {
        self.paths.external_root.as_ref().map(|r| r.join("external.jsonl"))
    }
}

/// Reads a synthetic-corpus spec; TOML or JSON by extension.
pub fn load_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read spec {}", path.display()))?;
    let spec: SynthSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("invalid spec {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("invalid spec {}", path.display()))?
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book_config() -> String {
        let page = include_str!("../../../book/src/cli.md");
        let start = page.find("```toml\n").expect("toml block") + "```toml\n".len();
        let len = page[start..].find("```").expect("closing fence");
        page[start..start + len].to_string()
    }

    #[test]
    fn guide_config_parses_and_matches_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, book_config()).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.paths.output_root, dir.path().join("runs/demo"));
        assert_eq!(cfg.pipeline, PipelineConfig::default());
    }

    #[test]
    fn overrides_only_switch_features_off() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.use_triplet = false;
        cfg.apply(&Overrides {
            epochs: Some(3),
            no_pseudo: true,
            random_selection: true,
            ..Overrides::default()
        });
        assert_eq!(cfg.pipeline.train.epochs, 3);
        assert!(!cfg.pipeline.use_triplet && !cfg.pipeline.use_pseudo && cfg.pipeline.use_external);
        assert!(cfg.pipeline.selection.random_baseline);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[pipeline]\nstagez = 3\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(format!("{err:#}").contains("stagez"), "{err:#}");
    }

    #[test]
    fn external_root_required_for_later_stages() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        cfg.pipeline.stages = 1;
        assert!(cfg.validate().is_ok());
    }
}
