use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ClusterConfig, LabelSource, PipelineConfig, StageConfig};
use super::data::{Clip, Corpus};
use super::train::{train, EpochLoss, TrainItem};
use crate::checkpoint::Checkpoint;
use crate::cluster::{
    anomaly_score, assign_pseudo_labels, build_representatives, PseudoInput, PseudoLabelTable, RepresentativeSet,
};
use crate::error::{invalid, Error, Result};
use crate::evalio::{evaluate_scores, scores_to_tsv, Domain, EvalReport, ScoredClip};
use crate::losses::LossTerms;
use crate::model::{ModelInput, ModelState};
use crate::selector::{
    machine_threshold, select_pseudo_anomalous, select_random, ExternalCandidate, Selection, SelectionConfig,
};

/// `zcat` of every input, in input order.
pub fn embed_zcat(model: &ModelState, inputs: &[&ModelInput]) -> Result<Vec<Vec<f32>>> {
    Ok(model.embed_all(inputs)?.into_iter().map(|e| e.zcat).collect())
}

fn reps_for<'a>(reps: &'a [RepresentativeSet], machine: &str) -> Result<&'a RepresentativeSet> {
    reps.iter()
        .find(|r| r.machine == machine && !r.is_empty())
        .ok_or_else(|| Error::MissingRepresentatives(machine.to_string()))
}

/// Representatives per machine from original training clips only.
pub fn representatives(
    model: &ModelState,
    train: &[Clip],
    clusters: &ClusterConfig,
    seed: u64,
) -> Result<Vec<RepresentativeSet>> {
    let inputs: Vec<&ModelInput> = train.iter().map(|c| &c.input).collect();
    let z = embed_zcat(model, &inputs)?;
    let mut by_machine: BTreeMap<&str, (Vec<Vec<f32>>, Vec<Vec<f32>>)> = BTreeMap::new();
    for (c, z) in train.iter().zip(z) {
        let e = by_machine.entry(&c.record.machine).or_default();
        match c.record.domain {
            Domain::Source => e.0.push(z),
            Domain::Target => e.1.push(z),
        }
    }
    by_machine
        .into_par_iter()
        .map(|(m, (src, tgt))| build_representatives(m, &src, &tgt, clusters.k_source, clusters.k_target, seed))
        .collect()
}

/// Anomaly score of every clip against its machine's representatives.
pub fn score_clips(model: &ModelState, reps: &[RepresentativeSet], clips: &[Clip]) -> Result<Vec<ScoredClip>> {
    let inputs: Vec<&ModelInput> = clips.iter().map(|c| &c.input).collect();
    let z = embed_zcat(model, &inputs)?;
    clips
        .iter()
        .zip(&z)
        .map(|(c, z)| {
            Ok(ScoredClip {
                clip_id: c.record.id.clone(),
                machine: c.record.machine.clone(),
                domain: c.record.domain,
                condition: c.record.condition,
                score: anomaly_score(z, reps_for(reps, &c.record.machine)?)?,
            })
        })
        .collect()
}

/// Outcome of scoring the external pool with a trained model.
#[derive(Clone, Debug)]
pub struct ExternalSelection {
    pub thresholds: BTreeMap<String, f64>,
    pub candidates: Vec<ExternalCandidate>,
    pub selection: Selection,
}

/// Scores the external pool against every machine, derives per-machine
/// thresholds from the training clips and selects pseudo-anomalous clips.
pub fn select_external(
    model: &ModelState,
    reps: &[RepresentativeSet],
    corpus: &Corpus,
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<ExternalSelection> {
    cfg.validate()?;
    let machines = corpus.machines();
    let train_scores = score_clips(model, reps, &corpus.train)?;
    let mut per_machine: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &train_scores {
        per_machine.entry(s.machine.clone()).or_default().push(s.score);
    }
    let thresholds: BTreeMap<String, f64> = per_machine
        .iter()
        .map(|(m, s)| Ok((m.clone(), machine_threshold(s)?)))
        .collect::<Result<_>>()?;
    let inputs: Vec<&ModelInput> = corpus.external.iter().map(|c| &c.input).collect();
    let z = embed_zcat(model, &inputs)?;
    let machine_reps: Vec<&RepresentativeSet> = machines.iter().map(|m| reps_for(reps, m)).collect::<Result<_>>()?;
    let candidates: Vec<ExternalCandidate> = corpus
        .external
        .par_iter()
        .zip(&z)
        .map(|(c, z)| {
            let scores = machines
                .iter()
                .zip(&machine_reps)
                .map(|(m, r)| Ok((m.clone(), anomaly_score(z, r)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            ExternalCandidate::new(c.id.clone(), c.class.clone(), scores)
        })
        .collect::<Result<_>>()?;
    let selection = if corpus.external.is_empty() {
        warn!("external pool is empty; nothing to select");
        Selection::default()
    } else if cfg.random_baseline {
        select_random(&candidates, &machines, cfg, seed)?
    } else {
        select_pseudo_anomalous(&candidates, &thresholds, cfg)?
    };
    Ok(ExternalSelection {
        thresholds,
        candidates,
        selection,
    })
}

/// Pseudo-labels of the training clips from a trained model's `zcat`.
pub fn pseudo_label(
    model: &ModelState,
    train: &[Clip],
    clusters: &ClusterConfig,
    seed: u64,
) -> Result<PseudoLabelTable> {
    let inputs: Vec<&ModelInput> = train.iter().map(|c| &c.input).collect();
    let z = embed_zcat(model, &inputs)?;
    let pin: Vec<PseudoInput> = train
        .iter()
        .zip(z)
        .map(|(c, z)| PseudoInput {
            clip_id: c.record.id.clone(),
            machine: c.record.machine.clone(),
            domain: c.record.domain,
            embedding: z,
        })
        .collect();
    assign_pseudo_labels(&pin, clusters.k_source, clusters.k_target_pseudo, seed)
}

/// Class name of an original clip.
pub fn clip_label(clip: &Clip, source: LabelSource, pseudo: Option<usize>) -> Result<String> {
    let r = &clip.record;
    let base = match source {
        LabelSource::Machine => r.machine.clone(),
        LabelSource::MachineAttribute => match &r.attribute {
            Some(a) => format!("{}_{a}", r.machine),
            None => return invalid(format!("clip `{}` has no attribute label", r.id)),
        },
    };
    Ok(match pseudo {
        Some(p) => format!("{base}_{p}"),
        None => base,
    })
}

/// Loss values and evaluation of one stage, written as `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: u32,
    pub config_hash: String,
    /// Config hash of the stage whose model was used for selection and pseudo-labels.
    pub parent_hash: Option<String>,
    pub seed: u64,
    pub class_count: usize,
    pub train_clips: usize,
    pub external_added: usize,
    pub thresholds: BTreeMap<String, f64>,
    pub n_out: BTreeMap<String, usize>,
    pub pseudo_skipped: Vec<(String, Domain)>,
    pub first_batch: Option<LossTerms>,
    pub loss_curve: Vec<EpochLoss>,
    pub eval: EvalReport,
}

/// Everything one stage produces.
#[derive(Clone, Debug)]
pub struct StageArtifacts {
    pub config: StageConfig,
    pub checkpoint: Checkpoint,
    pub pseudo_labels: Option<PseudoLabelTable>,
    pub selection: Option<Selection>,
    pub metrics: StageMetrics,
}

impl StageArtifacts {
    pub fn stage(&self) -> u32 {
        self.config.stage
    }

    pub fn dir_name(stage: u32) -> String {
        format!("stage_{stage}")
    }

    /// Reads the checkpoint, config and metrics of `stage_<M>/`; selection
    /// and pseudo-label tables are not reloaded.
    pub fn read(dir: &Path) -> Result<Self> {
        let config: StageConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let metrics: StageMetrics = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json"))?)?;
        let checkpoint = Checkpoint::load(&dir.join("checkpoint.bin"))?;
        if checkpoint.config_hash != metrics.config_hash || config.hash() != metrics.config_hash {
            return invalid(format!("{}: checkpoint, config and metrics disagree", dir.display()));
        }
        Ok(Self {
            config,
            checkpoint,
            pseudo_labels: None,
            selection: None,
            metrics,
        })
    }

    /// Writes `stage_<M>/` under `out` and returns its path.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let dir = out.join(Self::dir_name(self.stage()));
        std::fs::create_dir_all(&dir)?;
        self.checkpoint.save(&dir.join("checkpoint.bin"))?;
        std::fs::write(
            dir.join("representatives.json"),
            serde_json::to_string_pretty(&self.checkpoint.representatives)?,
        )?;
        if let Some(p) = &self.pseudo_labels {
            std::fs::write(dir.join("pseudo_labels.tsv"), p.to_tsv())?;
        }
        if let Some(s) = &self.selection {
            std::fs::write(dir.join("external_selection.tsv"), s.to_tsv())?;
        }
        std::fs::write(dir.join("scores.tsv"), scores_to_tsv(&self.metrics.eval.scores))?;
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&self.metrics)? + "\n",
        )?;
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&self.config)? + "\n",
        )?;
        Ok(dir)
    }
}

/// Runs stage `cfg.stage`. Stages from 2 on select external data and
/// pseudo-label with the previous stage's model, then retrain from scratch.
pub fn run_stage(corpus: &Corpus, cfg: &StageConfig, prev: Option<&StageArtifacts>) -> Result<StageArtifacts> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return invalid("no training clips");
    }
    let parent = match (cfg.stage, prev) {
        (1, Some(_)) => return invalid("stage 1 takes no previous stage"),
        (1, None) => None,
        (m, None) => return invalid(format!("stage {m} needs the artifacts of stage {}", m - 1)),
        (m, Some(p)) if p.stage() != m - 1 => {
            return invalid(format!(
                "stage {m} got artifacts of stage {}, expected {}",
                p.stage(),
                m - 1
            ))
        }
        (_, Some(p)) => Some(p),
    };
    let machines = corpus.machines();
    let machine_idx: BTreeMap<&str, usize> = machines.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    info!(
        "stage {}: {} training clips, {} machines",
        cfg.stage,
        corpus.train.len(),
        machines.len()
    );

    let ext = match parent {
        Some(p) if cfg.use_external => Some(select_external(
            &p.checkpoint.model,
            &p.checkpoint.representatives,
            corpus,
            &cfg.selection,
            cfg.seed,
        )?),
        _ => None,
    };
    let pseudo = match parent {
        Some(p) if cfg.use_pseudo => Some(pseudo_label(
            &p.checkpoint.model,
            &corpus.train,
            &cfg.clusters,
            cfg.seed,
        )?),
        _ => None,
    };

    let pseudo_map = pseudo.as_ref().map(|t| t.by_clip());
    let mut labels = Vec::with_capacity(corpus.train.len());
    for c in &corpus.train {
        let p = match &pseudo_map {
            Some(m) => Some(
                *m.get(c.record.id.as_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("clip `{}` has no pseudo-label", c.record.id)))?,
            ),
            None => None,
        };
        labels.push(clip_label(c, cfg.label_source, p)?);
    }
    let ext_idx: BTreeMap<&str, usize> = corpus
        .external
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let mut ext_items = Vec::new();
    if let Some(e) = &ext {
        for s in e.selection.iter() {
            let i = *ext_idx
                .get(s.clip_id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("selected clip `{}` not in pool", s.clip_id)))?;
            ext_items.push((i, machine_idx[s.machine.as_str()], s.label.clone()));
        }
    }
    let mut classes: Vec<String> = labels
        .iter()
        .cloned()
        .chain(ext_items.iter().map(|e| e.2.clone()))
        .collect();
    classes.sort();
    classes.dedup();
    let class_of = |l: &str| {
        classes
            .binary_search_by(|c| c.as_str().cmp(l))
            .expect("label registered")
    };

    let mut items: Vec<TrainItem> = corpus
        .train
        .iter()
        .zip(&labels)
        .map(|(c, l)| TrainItem {
            wave: &c.wave,
            input: &c.input,
            label: class_of(l),
            machine: machine_idx[c.record.machine.as_str()],
            anchor: true,
        })
        .collect();
    items.extend(ext_items.iter().map(|(i, m, l)| TrainItem {
        wave: &corpus.external[*i].wave,
        input: &corpus.external[*i].input,
        label: class_of(l),
        machine: *m,
        anchor: false,
    }));

    let outcome = train(&items, classes.len(), &cfg.train, cfg.use_triplet, cfg.seed, cfg.stage)?;
    let reps = representatives(&outcome.model, &corpus.train, &cfg.clusters, cfg.seed)?;
    let scores = score_clips(&outcome.model, &reps, &corpus.test)?;
    let eval = evaluate_scores(&scores)?;
    let config_hash = cfg.hash();
    let metrics = StageMetrics {
        stage: cfg.stage,
        config_hash: config_hash.clone(),
        parent_hash: parent.map(|p| p.metrics.config_hash.clone()),
        seed: cfg.seed,
        class_count: classes.len(),
        train_clips: corpus.train.len(),
        external_added: ext_items.len(),
        thresholds: ext.as_ref().map(|e| e.thresholds.clone()).unwrap_or_default(),
        n_out: ext.as_ref().map(|e| e.selection.n_out.clone()).unwrap_or_default(),
        pseudo_skipped: pseudo.as_ref().map(|p| p.skipped.clone()).unwrap_or_default(),
        first_batch: outcome.first_batch,
        loss_curve: outcome.loss_curve,
        eval,
    };
    info!("stage {}: mean AUC {:.2}", cfg.stage, metrics.eval.mean_auc_all);
    Ok(StageArtifacts {
        config: cfg.clone(),
        checkpoint: Checkpoint {
            model: outcome.model,
            classes,
            representatives: reps,
            config_hash,
        },
        pseudo_labels: pseudo,
        selection: ext.map(|e| e.selection),
        metrics,
    })
}

/// Runs stages `1..=cfg.stages`, each consuming the previous one. Artifacts
/// are written under `out` as they complete.
pub fn iterate(corpus: &Corpus, cfg: &PipelineConfig, out: Option<&Path>) -> Result<Vec<StageArtifacts>> {
    cfg.validate()?;
    let mut stages: Vec<StageArtifacts> = Vec::with_capacity(cfg.stages as usize);
    for m in 1..=cfg.stages {
        let art = run_stage(corpus, &cfg.stage(m), stages.last()).map_err(|e| Error::Stage {
            stage: m,
            source: Box::new(e),
        })?;
        if let Some(out) = out {
            art.write(out)?;
        }
        stages.push(art);
    }
    Ok(stages)
}

/// Stage by machine table of `AUC_all`, plus the mean.
pub fn summary_table(stages: &[StageArtifacts]) -> String {
    let mut s = String::from("stage\tmachine\tauc_all\tauc_source\tauc_target\n");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for st in stages {
        for r in &st.metrics.eval.machines {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.2}\t{}\t{}",
                st.stage(),
                r.machine,
                r.auc_all,
                opt(r.auc_source),
                opt(r.auc_target)
            );
        }
        let _ = writeln!(s, "{}\tmean\t{:.2}\t-\t-", st.stage(), st.metrics.eval.mean_auc_all);
    }
    s
}
