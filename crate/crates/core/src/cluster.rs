//! k-means, representative vectors, cosine scoring and pseudo-labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::evalio::Domain;

pub const K_SOURCE: usize = 16;
pub const K_TARGET: usize = 10;
pub const K_TARGET_PSEUDO: usize = 4;

/// Lloyd iteration settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Independent k-means++ restarts; the lowest inertia wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f32>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
pub fn nearest(point: &[f32], centroids: &[Vec<f32>]) -> (usize, f64) {
    let p: Vec<f64> = point.iter().map(|&v| v as f64).collect();
    nearest_f64(&p, centroids.iter().map(|c| c.iter().map(|&v| v as f64).collect()))
}

fn nearest_f64(p: &[f64], centroids: impl Iterator<Item = Vec<f64>>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.enumerate() {
        let d: f64 = p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest_f64(p, centroids.iter().cloned())).unzip()
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>, f64, usize) {
    let dim = points[0].len();
    let mut centroids = plus_plus(points, k, rng);
    let (mut labels, mut dists) = assign(points, &centroids);
    let mut inertia: f64 = dists.iter().sum();
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // Empty cluster: move it onto the worst-served point.
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("k <= number of points");
                taken[far] = true;
                dists[far] = 0.0;
                centroids[j] = points[far].clone();
            }
        }
        let (new_labels, new_dists) = assign(points, &centroids);
        let new_inertia: f64 = new_dists.iter().sum();
        assert!(
            new_inertia <= inertia * (1.0 + 1e-9) + 1e-12,
            "k-means inertia increased: {inertia} -> {new_inertia}"
        );
        inertia = new_inertia;
        dists = new_dists;
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    (centroids, labels, inertia, iters)
}

/// Lloyd's algorithm from k-means++ seeds, best of `cfg.n_init` restarts.
pub fn kmeans(points: &[Vec<f32>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::TooFewPoints {
            points: points.len(),
            k,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return shape_err("kmeans", "points differ in dimension");
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("kmeans points must be finite");
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64, usize)> = None;
    for _ in 0..cfg.n_init.max(1) {
        let run = lloyd(&pts, k, cfg.max_iters, &mut rng);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (c, assignments, _, iterations) = best.expect("at least one restart");
    let centroids: Vec<Vec<f32>> = c.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    // Final labels and inertia refer to the returned f32 centroids.
    let (assignments, inertia) = if centroids.is_empty() {
        (assignments, 0.0)
    } else {
        let mut inertia = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (j, d) = nearest(p, &centroids);
                inertia += d;
                j
            })
            .collect();
        (labels, inertia)
    };
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

/// Sum of squared distances to the nearest centroid.
pub fn inertia(points: &[Vec<f32>], centroids: &[Vec<f32>]) -> f64 {
    points.iter().map(|p| nearest(p, centroids).1).sum()
}

/// Normal-data representatives of one machine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub machine: String,
    pub source: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
}

impl RepresentativeSet {
    /// `J = |C_so| + |C_ta|`.
    pub fn len(&self) -> usize {
        self.source.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.source.iter().chain(&self.target)
    }
}

/// Clusters source embeddings into `k_so` centroids; target embeddings are
/// clustered into `k_ta` centroids, or used verbatim when there are at most `k_ta`.
pub fn build_representatives(
    machine: &str,
    source: &[Vec<f32>],
    target: &[Vec<f32>],
    k_so: usize,
    k_ta: usize,
    seed: u64,
) -> Result<RepresentativeSet> {
    if source.is_empty() {
        return invalid(format!("machine `{machine}` has no source-domain training embeddings"));
    }
    let k = k_so.min(source.len());
    if k < k_so {
        log::warn!("machine `{machine}`: {} source clips, using k = {k}", source.len());
    }
    let cfg = KMeansConfig::default();
    let src = kmeans(source, k, seed, &cfg)?.centroids;
    let tgt = if target.len() <= k_ta {
        target.to_vec()
    } else {
        kmeans(target, k_ta, seed ^ 0x7a7a, &cfg)?.centroids
    };
    Ok(RepresentativeSet {
        machine: machine.to_string(),
        source: src,
        target: tgt,
    })
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err("similarity", format!("dims {} and {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na2: f64 = a.iter().map(|&x| x as f64 * x as f64).sum();
    let nb2: f64 = b.iter().map(|&x| x as f64 * x as f64).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return invalid("cosine similarity of a zero vector");
    }
    // sqrt(x * x) == x, so identical vectors give exactly 1.
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine similarity to every representative.
pub fn similarity_profile(z: &[f32], reps: &RepresentativeSet) -> Result<Vec<f64>> {
    reps.iter().map(|c| cosine(z, c)).collect()
}

/// `-max_j cos(z, c_j)`; higher is more anomalous.
pub fn anomaly_score(z: &[f32], reps: &RepresentativeSet) -> Result<f64> {
    if reps.is_empty() {
        return Err(Error::MissingRepresentatives(reps.machine.clone()));
    }
    let best = similarity_profile(z, reps)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(-best)
}

/// An embedding to be pseudo-labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoInput {
    pub clip_id: String,
    pub machine: String,
    pub domain: Domain,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub clip_id: String,
    pub machine: String,
    pub domain: Domain,
    pub pseudo_class: usize,
}

/// Pseudo-class per clip, plus the (machine, domain) partitions left unlabeled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    pub labels: Vec<PseudoLabel>,
    pub skipped: Vec<(String, Domain)>,
    pub k_source: usize,
    pub k_target: usize,
}

impl PseudoLabelTable {
    pub fn get(&self, clip_id: &str) -> Option<&PseudoLabel> {
        self.labels.iter().find(|l| l.clip_id == clip_id)
    }

    pub fn by_clip(&self) -> BTreeMap<&str, usize> {
        self.labels
            .iter()
            .map(|l| (l.clip_id.as_str(), l.pseudo_class))
            .collect()
    }

    /// Tab-separated `clip_id, machine, domain, pseudo_class` with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("clip_id\tmachine\tdomain\tpseudo_class\n");
        for l in &self.labels {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                l.clip_id,
                l.machine,
                l.domain.as_str(),
                l.pseudo_class
            );
        }
        s
    }
}

/// Per machine and domain: k-means in raw embedding space, then
/// nearest-centroid assignment. Source classes are `0..k_so`, target classes
/// follow at `k_so..k_so + k_ta`.
pub fn assign_pseudo_labels(inputs: &[PseudoInput], k_so: usize, k_ta: usize, seed: u64) -> Result<PseudoLabelTable> {
    if k_so == 0 || k_ta == 0 {
        return invalid("pseudo-label cluster counts must be positive");
    }
    let mut parts: BTreeMap<(String, Domain), Vec<usize>> = BTreeMap::new();
    let machines: Vec<String> = {
        let mut m: Vec<String> = inputs.iter().map(|i| i.machine.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    for m in &machines {
        for d in [Domain::Source, Domain::Target] {
            parts.insert((m.clone(), d), Vec::new());
        }
    }
    for (i, inp) in inputs.iter().enumerate() {
        parts
            .get_mut(&(inp.machine.clone(), inp.domain))
            .expect("machine registered")
            .push(i);
    }
    let jobs: Vec<(usize, &(String, Domain), &Vec<usize>)> =
        parts.iter().enumerate().map(|(j, (k, v))| (j, k, v)).collect();
    let results: Vec<Result<Option<Vec<(usize, usize)>>>> = jobs
        .par_iter()
        .map(|&(job, (machine, domain), idx)| {
            if idx.is_empty() {
                return Ok(None);
            }
            let (k_full, offset) = match domain {
                Domain::Source => (k_so, 0),
                Domain::Target => (k_ta, k_so),
            };
            let k = k_full.min(idx.len());
            if k < k_full {
                log::warn!(
                    "machine `{machine}` {}: {} clips, using k = {k}",
                    domain.as_str(),
                    idx.len()
                );
            }
            let pts: Vec<Vec<f32>> = idx.iter().map(|&i| inputs[i].embedding.clone()).collect();
            let job_seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(job as u64 + 1));
            let km = kmeans(&pts, k, job_seed, &KMeansConfig::default())?;
            Ok(Some(
                idx.iter()
                    .zip(&km.assignments)
                    .map(|(&i, &a)| (i, offset + a))
                    .collect(),
            ))
        })
        .collect();
    let mut labels = vec![None; inputs.len()];
    let mut skipped = Vec::new();
    for ((_, key, _), r) in jobs.iter().zip(results) {
        match r? {
            Some(pairs) => pairs.into_iter().for_each(|(i, c)| labels[i] = Some(c)),
            None => {
                log::warn!("machine `{}` has no {} clips to pseudo-label", key.0, key.1.as_str());
                skipped.push((*key).clone());
            }
        }
    }
    Ok(PseudoLabelTable {
        labels: inputs
            .iter()
            .zip(labels)
            .map(|(inp, c)| PseudoLabel {
                clip_id: inp.clip_id.clone(),
                machine: inp.machine.clone(),
                domain: inp.domain,
                pseudo_class: c.expect("every partition labeled or skipped"),
            })
            .collect(),
        skipped,
        k_source: k_so,
        k_target: k_ta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[&[f32]]) -> Vec<Vec<f32>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let p = pts(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
        let r = kmeans(&p, 1, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(r.centroids, vec![vec![3.0, 5.0]]);
    }

    #[test]
    fn two_points_two_clusters() {
        let p = pts(&[&[0.0], &[10.0]]);
        let r = kmeans(&p, 2, 3, &KMeansConfig::default()).unwrap();
        let mut c: Vec<f32> = r.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(r.inertia, 0.0);
        assert!(matches!(
            kmeans(&p, 3, 0, &KMeansConfig::default()),
            Err(Error::TooFewPoints { points: 2, k: 3 })
        ));
    }

    #[test]
    fn identical_points_fall_into_cluster_zero() {
        let p = vec![vec![0.5f32, -1.0]; 7];
        let r = kmeans(&p, 3, 1, &KMeansConfig::default()).unwrap();
        assert!(r.assignments.iter().all(|&a| a == 0));
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn representatives_sizes() {
        let src: Vec<Vec<f32>> = (0..40).map(|i| vec![(i % 7) as f32, (i / 7) as f32 + 1.0]).collect();
        let tgt: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 2.0]).collect();
        let r = build_representatives("fan", &src, &tgt, 16, 10, 0).unwrap();
        assert_eq!((r.source.len(), r.target.len(), r.len()), (16, 10, 26));
        assert_eq!(r.target, tgt);
        let same = vec![vec![1.0f32, 1.0]; 20];
        let r = build_representatives("fan", &same, &tgt[..2], 16, 10, 0).unwrap();
        assert!(r.source.iter().all(|c| c == &same[0]));
        assert!(build_representatives("fan", &[], &tgt, 16, 10, 0).is_err());
    }

    #[test]
    fn scoring_examples() {
        let reps = RepresentativeSet {
            machine: "m".into(),
            source: pts(&[&[1.0, 0.0]]),
            target: pts(&[&[0.0, 1.0]]),
        };
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let prof = similarity_profile(&[h, h], &reps).unwrap();
        assert!(prof.iter().all(|s| (s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6));
        assert!((anomaly_score(&[h, h], &reps).unwrap() + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(anomaly_score(&[1.0, 0.0], &reps).unwrap(), -1.0);
        let orth = RepresentativeSet {
            machine: "m".into(),
            source: pts(&[&[1.0, 0.0, 0.0]]),
            target: pts(&[&[0.0, 1.0, 0.0]]),
        };
        assert_eq!(anomaly_score(&[0.0, 0.0, 2.0], &orth).unwrap(), 0.0);
        assert!(anomaly_score(&[0.0, 0.0], &reps).is_err());
        let empty = RepresentativeSet {
            machine: "gone".into(),
            source: vec![],
            target: vec![],
        };
        assert!(matches!(anomaly_score(&[1.0, 0.0], &empty), Err(Error::MissingRepresentatives(m)) if m == "gone"));
    }

    fn pinput(id: usize, machine: &str, domain: Domain, e: Vec<f32>) -> PseudoInput {
        PseudoInput {
            clip_id: format!("c{id}"),
            machine: machine.into(),
            domain,
            embedding: e,
        }
    }

    #[test]
    fn pseudo_labels_offsets_and_distinctness() {
        let mut inputs = Vec::new();
        for i in 0..5 {
            inputs.push(pinput(i, "fan", Domain::Source, vec![i as f32 * 10.0, 0.0]));
        }
        for i in 5..8 {
            inputs.push(pinput(i, "fan", Domain::Target, vec![0.0, i as f32 * 10.0]));
        }
        let t = assign_pseudo_labels(&inputs, 16, 4, 0).unwrap();
        let src: Vec<usize> = t.labels[..5].iter().map(|l| l.pseudo_class).collect();
        let tgt: Vec<usize> = t.labels[5..].iter().map(|l| l.pseudo_class).collect();
        let mut s = src.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 5);
        assert!(src.iter().all(|&c| c < 16));
        assert!(tgt.iter().all(|&c| (16..20).contains(&c)));
        assert!(t.skipped.is_empty());
        assert!(t
            .to_tsv()
            .starts_with("clip_id\tmachine\tdomain\tpseudo_class\nc0\tfan\tsource\t"));
    }

    #[test]
    fn missing_domain_is_skipped() {
        let inputs: Vec<PseudoInput> = (0..3)
            .map(|i| pinput(i, "pump", Domain::Source, vec![i as f32]))
            .collect();
        let t = assign_pseudo_labels(&inputs, 16, 4, 0).unwrap();
        assert_eq!(t.skipped, vec![("pump".to_string(), Domain::Target)]);
        assert_eq!(t.labels.len(), 3);
    }
}
