use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use super::auc::auc;
use super::manifest::{Condition, Domain};
use crate::error::{Error, Result};

/// Anomaly score of one test clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub clip_id: String,
    pub machine: String,
    pub domain: Domain,
    pub condition: Condition,
    pub score: f64,
}

pub const SCORE_HEADER: &str = "clip_id\tmachine\tdomain\tcondition\tscore";

/// Tab-separated scores, header first. Scores are written in their shortest
/// exact form so that re-reading them reproduces every AUC.
pub fn scores_to_tsv(scores: &[ScoredClip]) -> String {
    let mut s = format!("{SCORE_HEADER}\n");
    for c in scores {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            c.clip_id,
            c.machine,
            c.domain.as_str(),
            c.condition.as_str(),
            c.score
        );
    }
    s
}

/// Parses the output of [`scores_to_tsv`].
pub fn scores_from_tsv(text: &str) -> Result<Vec<ScoredClip>> {
    let bad = |line: usize, reason: String| Error::Manifest {
        what: "score table",
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCORE_HEADER => {}
        _ => return Err(bad(1, "missing header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, format!("{} fields, expected 5", f.len())));
        }
        let domain = match f[2] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            d => return Err(bad(i + 1, format!("unknown domain `{d}`"))),
        };
        let condition = match f[3] {
            "normal" => Condition::Normal,
            "anomalous" => Condition::Anomalous,
            "unknown" => Condition::Unknown,
            c => return Err(bad(i + 1, format!("unknown condition `{c}`"))),
        };
        let score = f[4].parse().map_err(|e| bad(i + 1, format!("score: {e}")))?;
        out.push(ScoredClip {
            clip_id: f[0].into(),
            machine: f[1].into(),
            domain,
            condition,
            score,
        });
    }
    Ok(out)
}

/// AUCs of one machine in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineReport {
    pub machine: String,
    pub auc_all: f64,
    /// Within-domain AUC; absent when the domain lacks normals or anomalies.
    pub auc_source: Option<f64>,
    pub auc_target: Option<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub machines: Vec<MachineReport>,
    /// Arithmetic mean of `auc_all` over machines.
    pub mean_auc_all: f64,
    pub scores: Vec<ScoredClip>,
}

fn split_scores<'a>(clips: impl Iterator<Item = &'a ScoredClip>) -> (Vec<f64>, Vec<f64>) {
    let mut normal = Vec::new();
    let mut anomalous = Vec::new();
    for c in clips {
        match c.condition {
            Condition::Normal => normal.push(c.score),
            Condition::Anomalous => anomalous.push(c.score),
            Condition::Unknown => {}
        }
    }
    (normal, anomalous)
}

fn domain_auc(clips: &[&ScoredClip], d: Domain) -> Result<Option<f64>> {
    let (n, a) = split_scores(clips.iter().copied().filter(|c| c.domain == d));
    if n.is_empty() || a.is_empty() {
        return Ok(None);
    }
    auc(&n, &a).map(Some)
}

/// Per-machine AUCs of scored test clips. Machines lacking normal or
/// anomalous clips are left out with a warning.
pub fn evaluate_scores(scores: &[ScoredClip]) -> Result<EvalReport> {
    let mut by_machine: BTreeMap<&str, Vec<&ScoredClip>> = BTreeMap::new();
    for c in scores {
        by_machine.entry(&c.machine).or_default().push(c);
    }
    let mut machines = Vec::new();
    for (m, clips) in by_machine {
        let (n, a) = split_scores(clips.iter().copied());
        if n.is_empty() || a.is_empty() {
            warn!(
                "machine `{m}` has {} normal and {} anomalous test clips; left out",
                n.len(),
                a.len()
            );
            continue;
        }
        machines.push(MachineReport {
            machine: m.to_string(),
            auc_all: auc(&n, &a)?,
            auc_source: domain_auc(&clips, Domain::Source)?,
            auc_target: domain_auc(&clips, Domain::Target)?,
            n_normal: n.len(),
            n_anomalous: a.len(),
        });
    }
    let mean_auc_all = if machines.is_empty() {
        0.0
    } else {
        machines.iter().map(|r| r.auc_all).sum::<f64>() / machines.len() as f64
    };
    Ok(EvalReport {
        machines,
        mean_auc_all,
        scores: scores.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(m: &str, d: Domain, c: Condition, s: f64) -> ScoredClip {
        ScoredClip {
            clip_id: format!("{m}{s}"),
            machine: m.into(),
            domain: d,
            condition: c,
            score: s,
        }
    }

    #[test]
    fn constant_scores_give_fifty() {
        let v: Vec<ScoredClip> = [Domain::Source, Domain::Target]
            .into_iter()
            .flat_map(|d| {
                [
                    clip("a", d, Condition::Normal, -0.5),
                    clip("a", d, Condition::Anomalous, -0.5),
                ]
            })
            .collect();
        let r = evaluate_scores(&v).unwrap();
        assert_eq!(r.machines.len(), 1);
        let m = &r.machines[0];
        assert_eq!((m.auc_all, m.auc_source, m.auc_target), (50.0, Some(50.0), Some(50.0)));
    }

    #[test]
    fn domain_pairing_is_within_domain() {
        // target normals score above source anomalies: hurts AUC_all only
        let v = vec![
            clip("a", Domain::Source, Condition::Normal, 0.1),
            clip("a", Domain::Source, Condition::Anomalous, 0.2),
            clip("a", Domain::Target, Condition::Normal, 0.3),
            clip("a", Domain::Target, Condition::Anomalous, 0.4),
            clip("b", Domain::Source, Condition::Normal, 0.0),
        ];
        let r = evaluate_scores(&v).unwrap();
        assert_eq!(r.machines.len(), 1);
        let m = &r.machines[0];
        assert_eq!(m.auc_source, Some(100.0));
        assert_eq!(m.auc_target, Some(100.0));
        assert_eq!(m.auc_all, 75.0);
    }

    #[test]
    fn tsv_round_trip() {
        let v = vec![
            clip("fan", Domain::Target, Condition::Anomalous, -0.1234564),
            clip("fan", Domain::Source, Condition::Unknown, 1.0),
        ];
        let t = scores_to_tsv(&v);
        assert!(t.contains("\t-0.1234564\n"));
        let back = scores_from_tsv(&t).unwrap();
        assert_eq!(back, v);
        assert_eq!(scores_to_tsv(&back), t);
        assert_eq!(scores_to_tsv(&[]), format!("{SCORE_HEADER}\n"));
    }
}
