//! Pseudo-anomalous data selection from an external corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Cap on external clips added per machine.
    pub n_max: usize,
    /// Draw uniformly from the pool instead of using anomaly scores.
    pub random_baseline: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_max: 1000,
            random_baseline: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return invalid("n_max must be at least 1");
        }
        Ok(())
    }
}

/// Class name of an external clip added under `machine`.
pub fn external_label(machine: &str, external_class: &str) -> String {
    format!("{machine}_{external_class}")
}

/// An external clip scored against every machine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalCandidate {
    pub clip_id: String,
    pub external_class: String,
    /// Anomaly score against each machine's representatives.
    pub scores: BTreeMap<String, f64>,
    /// The machine with the lowest score; ties go to the first name.
    pub machine: String,
    pub score: f64,
}

impl ExternalCandidate {
    pub fn new(
        clip_id: impl Into<String>,
        external_class: impl Into<String>,
        scores: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        let (machine, score) = scores
            .iter()
            .fold(None::<(&String, f64)>, |best, (m, &s)| match best {
                Some((_, b)) if b <= s => best,
                _ => Some((m, s)),
            })
            .ok_or_else(|| crate::Error::InvalidArgument(format!("candidate `{clip_id}` has no scores")))?;
        if scores.values().any(|s| s.is_nan()) {
            return invalid(format!("candidate `{clip_id}` has a NaN score"));
        }
        Ok(Self {
            machine: machine.clone(),
            score,
            clip_id,
            external_class: external_class.into(),
            scores,
        })
    }
}

/// Highest anomaly score among a machine's training clips.
pub fn machine_threshold(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return invalid("threshold needs at least one training score");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("training scores contain NaN");
    }
    Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedClip {
    pub clip_id: String,
    pub machine: String,
    pub score: f64,
    pub label: String,
}

/// Selected external clips per machine, plus how many passed the threshold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub per_machine: BTreeMap<String, Vec<SelectedClip>>,
    pub n_out: BTreeMap<String, usize>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.per_machine.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &SelectedClip> {
        self.per_machine.values().flatten()
    }

    /// Tab-separated `clip_id, machine, score, label` with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("clip_id\tmachine\tscore\tlabel\n");
        for c in self.iter() {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{}", c.clip_id, c.machine, c.score, c.label);
        }
        s
    }
}

fn pick(c: &ExternalCandidate, machine: &str) -> SelectedClip {
    SelectedClip {
        clip_id: c.clip_id.clone(),
        machine: machine.to_string(),
        score: c.scores.get(machine).copied().unwrap_or(c.score),
        label: external_label(machine, &c.external_class),
    }
}

/// Per machine: candidates assigned to it scoring strictly below its
/// threshold, lowest scores first, capped at `n_max`.
pub fn select_pseudo_anomalous(
    candidates: &[ExternalCandidate],
    thresholds: &BTreeMap<String, f64>,
    cfg: &SelectionConfig,
) -> Result<Selection> {
    cfg.validate()?;
    let mut sel = Selection::default();
    for (machine, &thr) in thresholds {
        let mut passing: Vec<(usize, &ExternalCandidate)> = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| &c.machine == machine && c.score < thr)
            .collect();
        passing.sort_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(&b.0)));
        sel.n_out.insert(machine.clone(), passing.len());
        let n_ex = passing.len().min(cfg.n_max);
        sel.per_machine.insert(
            machine.clone(),
            passing[..n_ex].iter().map(|(_, c)| pick(c, machine)).collect(),
        );
    }
    Ok(sel)
}

/// Per machine: `min(pool, n_max)` clips drawn uniformly without replacement
/// from the whole pool. A clip may be drawn for several machines.
pub fn select_random(
    candidates: &[ExternalCandidate],
    machines: &[String],
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<Selection> {
    let counts: BTreeMap<String, usize> = machines.iter().map(|m| (m.clone(), cfg.n_max)).collect();
    select_random_counts(candidates, &counts, seed)
}

/// Random selection with an explicit size per machine, e.g. matched to a
/// score-based selection.
pub fn select_random_counts(
    candidates: &[ExternalCandidate],
    counts: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Selection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sel = Selection::default();
    for (machine, &n) in counts {
        let n = n.min(candidates.len());
        let mut idx = sample(&mut rng, candidates.len(), n).into_vec();
        idx.sort_unstable();
        sel.n_out.insert(machine.clone(), candidates.len());
        sel.per_machine.insert(
            machine.clone(),
            idx.into_iter().map(|i| pick(&candidates[i], machine)).collect(),
        );
    }
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, class: &str, scores: &[(&str, f64)]) -> ExternalCandidate {
        ExternalCandidate::new(id, class, scores.iter().map(|(m, s)| (m.to_string(), *s)).collect()).unwrap()
    }

    #[test]
    fn threshold_is_max() {
        assert_eq!(machine_threshold(&[-0.9, -0.8, -0.95]).unwrap(), -0.8);
        assert_eq!(machine_threshold(&[0.3]).unwrap(), 0.3);
        assert_eq!(machine_threshold(&[-0.2, -0.1, -0.1]).unwrap(), -0.1);
        assert!(machine_threshold(&[]).is_err());
    }

    #[test]
    fn filter_sort_cap() {
        let cs = vec![
            cand("a", "x", &[("m", -0.5)]),
            cand("b", "x", &[("m", -0.9)]),
            cand("c", "x", &[("m", -0.2)]),
        ];
        let thr = BTreeMap::from([("m".to_string(), -0.4)]);
        let cfg = SelectionConfig {
            n_max: 1,
            ..Default::default()
        };
        let s = select_pseudo_anomalous(&cs, &thr, &cfg).unwrap();
        assert_eq!(s.per_machine["m"].len(), 1);
        assert_eq!(s.per_machine["m"][0].clip_id, "b");
        assert_eq!(s.n_out["m"], 2);

        let strict = BTreeMap::from([("m".to_string(), -0.9)]);
        let s = select_pseudo_anomalous(&cs, &strict, &cfg).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.to_tsv(), "clip_id\tmachine\tscore\tlabel\n");
    }

    #[test]
    fn assignment_and_labels() {
        let c = cand("a", "/m/05r5c", &[("fan", -0.3), ("pump", -0.7)]);
        assert_eq!((c.machine.as_str(), c.score), ("pump", -0.7));
        let tie = cand("t", "x", &[("fan", -0.5), ("pump", -0.5)]);
        assert_eq!(tie.machine, "fan");
        assert_eq!(external_label("machineA", "m/05r5c"), "machineA_m/05r5c");
        assert_ne!(
            external_label("machineA", "m/05r5c"),
            external_label("machineB", "m/05r5c")
        );
    }

    #[test]
    fn random_selection() {
        let cs: Vec<ExternalCandidate> = (0..10).map(|i| cand(&format!("c{i}"), "x", &[("m", 0.0)])).collect();
        let machines = vec!["m".to_string(), "n".to_string()];
        let big = SelectionConfig {
            n_max: 50,
            ..Default::default()
        };
        let s = select_random(&cs, &machines, &big, 1).unwrap();
        assert_eq!(s.per_machine["m"].len(), 10);
        assert_eq!(s.per_machine["n"][0].label, "n_x");
        let small = SelectionConfig {
            n_max: 4,
            ..Default::default()
        };
        let a = select_random(&cs, &machines, &small, 7).unwrap();
        assert_eq!(a, select_random(&cs, &machines, &small, 7).unwrap());
        assert_eq!(a.per_machine["m"].len(), 4);
    }
}
