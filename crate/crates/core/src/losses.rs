//! Embedding losses: temperature-scaled cosine similarity, triplet loss,
//! sub-cluster AdaCos and the subspace sum over the four heads.
//!
//! Each loss comes in two forms. The plain functions evaluate a single
//! embedding in `f64` and serve as reference implementations; the `*_graph`
//! functions record the same computation on an autodiff [`Graph`] for a batch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Scalar, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::features::{fit_length, mixup, pitch_shift, snr_mix, TripletConfig, Waveform};
use crate::model::{
    branch_center_name, forward, register_params, stack_inputs, Architecture, BnMode, EmbeddingBundle, ModelInput,
    ModelState, BRANCHES,
};

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err("cosine", format!("dims {} and {}", a.len(), b.len()));
    }
    let na2: f64 = a.iter().map(|&x| x as f64 * x as f64).sum();
    let nb2: f64 = b.iter().map(|&x| x as f64 * x as f64).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return invalid("cosine similarity of a zero vector");
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(dot / (na2 * nb2).sqrt())
}

/// `<z, z'> / (tau * |z| * |z'|)`.
pub fn sim_tau(z: &[f32], z2: &[f32], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    Ok(cosine(z, z2)? / tau)
}

/// `max(0, gamma + 1 - s(za, zp) + s(za, zn))`.
pub fn triplet_loss(za: &[f32], zp: &[f32], zn: &[f32], tau: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return invalid(format!("gamma must be nonnegative, got {gamma}"));
    }
    let sp = sim_tau(za, zp, tau)?;
    let sn = sim_tau(za, zn, tau)?;
    Ok(hinge(sp, sn, gamma))
}

/// The triplet hinge on precomputed similarities.
pub fn hinge(sp: f64, sn: f64, gamma: f64) -> f64 {
    (gamma + 1.0 + (sn - sp)).max(0.0)
}

/// Unit-norm sub-cluster centers of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct SubClusterBank {
    centers: Tensor<f32>,
    sub_clusters: usize,
    pub trainable: bool,
    pub scale: f64,
}

impl SubClusterBank {
    /// Takes `(C * S, D)` centers and normalizes each row.
    pub fn new(centers: Tensor<f32>, sub_clusters: usize, trainable: bool, scale: f64) -> Result<Self> {
        let s = centers.shape();
        if s.len() != 2 || sub_clusters == 0 || !s[0].is_multiple_of(sub_clusters) {
            return shape_err("sub-cluster bank", format!("centers {s:?} with S = {sub_clusters}"));
        }
        if !(scale > 0.0) {
            return invalid(format!("scale must be positive, got {scale}"));
        }
        let d = s[1];
        let mut centers = centers;
        for row in centers.data_mut().chunks_mut(d) {
            let n = norm(row);
            if n == 0.0 {
                return invalid("zero sub-cluster center");
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
        Ok(Self {
            centers,
            sub_clusters,
            trainable,
            scale,
        })
    }

    pub fn centers(&self) -> &Tensor<f32> {
        &self.centers
    }

    pub fn sub_clusters(&self) -> usize {
        self.sub_clusters
    }

    pub fn class_count(&self) -> usize {
        self.centers.shape()[0] / self.sub_clusters
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    /// Class logits `logsumexp_j(s * cos(z, c_cj)) - ln S`.
    pub fn logits(&self, z: &[f32]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return shape_err("scac", format!("embedding dim {}, bank dim {}", z.len(), self.dim()));
        }
        let s = self.sub_clusters;
        let ln_s = (s as f64).ln();
        (0..self.class_count())
            .map(|c| {
                let v: Vec<f64> = (0..s)
                    .map(|j| Ok(self.scale * cosine(z, self.centers.row(c * s + j))?))
                    .collect::<Result<_>>()?;
                Ok(logsumexp(&v) - ln_s)
            })
            .collect()
    }
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sub-cluster AdaCos loss for a single embedding and hard label.
pub fn scac_loss(z: &[f32], label: usize, bank: &SubClusterBank) -> Result<f64> {
    let mut target = vec![0.0; bank.class_count()];
    match target.get_mut(label) {
        Some(t) => *t = 1.0,
        None => return invalid(format!("label {label} out of range for {} classes", bank.class_count())),
    }
    scac_loss_soft(z, &target, bank)
}

/// Sub-cluster AdaCos loss against a soft label vector.
pub fn scac_loss_soft(z: &[f32], target: &[f64], bank: &SubClusterBank) -> Result<f64> {
    if target.len() != bank.class_count() {
        return shape_err(
            "scac",
            format!("{} targets for {} classes", target.len(), bank.class_count()),
        );
    }
    let logits = bank.logits(z)?;
    let lse = logsumexp(&logits);
    Ok(target.iter().zip(&logits).map(|(t, l)| t * (lse - l)).sum())
}

/// The four heads: concatenated (fixed centers) then one per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBanks {
    pub concat: SubClusterBank,
    pub branches: [SubClusterBank; BRANCHES],
}

impl SubspaceBanks {
    pub fn from_state(state: &ModelState) -> Result<Self> {
        let s = state.arch.sub_clusters;
        let branch = |b: usize| -> Result<SubClusterBank> {
            let name = branch_center_name(b);
            let c = state
                .params
                .get(&name)
                .ok_or_else(|| crate::Error::InvalidArgument(format!("missing `{name}`")))?;
            SubClusterBank::new(c.clone(), s, true, state.scales[b + 1])
        };
        Ok(Self {
            concat: SubClusterBank::new(state.fixed_centers.clone(), s, false, state.scales[0])?,
            branches: [branch(0)?, branch(1)?, branch(2)?],
        })
    }
}

/// `L_scac(z_cat) + sum_m L_scac(z_m)`.
pub fn subspace_loss(e: &EmbeddingBundle, label: usize, banks: &SubspaceBanks) -> Result<f64> {
    let mut total = scac_loss(&e.zcat, label, &banks.concat)?;
    for (z, bank) in e.branches.iter().zip(&banks.branches) {
        total += scac_loss(z, label, bank)?;
    }
    Ok(total)
}

/// Per-row SCAC loss `(N)` for embeddings `z (N, D)` against centers `(C * S, D)`.
pub fn scac_graph<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    centers: Var,
    scale: f64,
    sub_clusters: usize,
    targets: Tensor<T>,
) -> Result<Var> {
    let n = g.value(z).shape()[0];
    let cs = g.value(centers).shape()[0];
    if sub_clusters == 0 || !cs.is_multiple_of(sub_clusters) {
        return shape_err("scac", format!("{cs} centers with S = {sub_clusters}"));
    }
    let zn = g.l2_normalize(z)?;
    let cn = g.l2_normalize(centers)?;
    let cos = g.matmul(zn, cn, true)?;
    let scaled = g.scale(cos, T::lit(scale));
    let grouped = g.reshape(scaled, vec![n, cs / sub_clusters, sub_clusters])?;
    let lse = g.logsumexp_last(grouped)?;
    let logits = g.add_scalar(lse, T::lit(-(sub_clusters as f64).ln()));
    g.softmax_cross_entropy(logits, targets)
}

/// Per-row triplet hinge `(N)`.
pub fn triplet_graph<T: Scalar>(g: &mut Graph<T>, za: Var, zp: Var, zn: Var, tau: f64, gamma: f64) -> Result<Var> {
    let a = g.l2_normalize(za)?;
    let p = g.l2_normalize(zp)?;
    let n = g.l2_normalize(zn)?;
    let ap = g.mul(a, p)?;
    let an = g.mul(a, n)?;
    let sp = g.sum_last(ap)?;
    let sn = g.sum_last(an)?;
    let diff = g.sub(sn, sp)?;
    let scaled = g.scale(diff, T::lit(1.0 / tau));
    let shifted = g.add_scalar(scaled, T::lit(gamma + 1.0));
    Ok(g.relu(shifted))
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_trp: f64,
    pub l_ss: f64,
    pub l_mlt: f64,
}

impl LossTerms {
    pub fn new(l_trp: f64, l_ss: f64) -> Self {
        Self {
            l_trp,
            l_ss,
            l_mlt: l_trp + l_ss,
        }
    }
}

/// How a batch is turned into losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub triplet: TripletConfig,
    pub use_triplet: bool,
    /// Per-sample probability of replacing the subspace-loss input by a mixup.
    pub mixup_prob: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            triplet: TripletConfig::default(),
            use_triplet: true,
            mixup_prob: 0.5,
        }
    }
}

/// One training clip as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub wave: &'a Waveform,
    /// Precomputed network input of the unaugmented clip.
    pub input: &'a ModelInput,
    pub label: usize,
    pub machine: usize,
    /// Original machine clips anchor triplets; external clips do not.
    pub anchor: bool,
}

/// Network rows of a batch and how they combine into the losses.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub inputs: Vec<ModelInput>,
    /// Row of each subspace-loss term, with its soft target.
    pub ss_rows: Vec<usize>,
    pub ss_targets: Vec<Vec<f32>>,
    /// `(anchor, positive, negative)` rows.
    pub triplets: Vec<[usize; 3]>,
}

enum Draw {
    Keep(usize),
    Mix { item: usize, partner: usize, lambda: f64 },
}

/// Draws every random choice of a batch, then builds the augmented inputs.
///
/// All draws happen serially in item order; the signal processing runs in
/// parallel afterwards, so the plan depends only on the rng state.
pub fn plan_batch(
    items: &[BatchItem],
    arch: &Architecture,
    class_count: usize,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    if items.is_empty() {
        return invalid("empty batch");
    }
    if !(0.0..=1.0).contains(&cfg.mixup_prob) {
        return invalid(format!("mixup probability {} outside [0, 1]", cfg.mixup_prob));
    }
    cfg.triplet.validate()?;
    if let Some(it) = items.iter().find(|it| it.label >= class_count) {
        return invalid(format!("label {} out of range for {class_count} classes", it.label));
    }
    let mut triplet_draws = Vec::new();
    if cfg.use_triplet {
        let mut by_machine: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate().filter(|(_, it)| it.anchor) {
            by_machine.entry(it.machine).or_default().push(i);
        }
        if by_machine.len() < 2 {
            return invalid("triplets need clips from at least two machine types in every batch");
        }
        for (i, it) in items.iter().enumerate().filter(|(_, it)| it.anchor) {
            let others: Vec<usize> = by_machine.keys().copied().filter(|&m| m != it.machine).collect();
            let m = *others.choose(rng).expect("two machines present");
            let j = *by_machine[&m].choose(rng).expect("nonempty machine");
            let alpha = cfg.triplet.sample_alpha(rng);
            let beta = cfg.triplet.sample_beta(rng);
            triplet_draws.push((i, j, alpha, beta));
        }
    }
    let mut ss_draws = Vec::with_capacity(items.len());
    for i in 0..items.len() {
        if cfg.mixup_prob > 0.0 && rng.gen_bool(cfg.mixup_prob) {
            let lambda: f64 = rng.gen();
            let partner = rng.gen_range(0..items.len());
            ss_draws.push(Draw::Mix {
                item: i,
                partner,
                lambda,
            });
        } else {
            ss_draws.push(Draw::Keep(i));
        }
    }

    let onehot = |l: usize| {
        let mut v = vec![0.0f32; class_count];
        v[l] = 1.0;
        v
    };
    let ss: Vec<(Option<ModelInput>, Vec<f32>)> = ss_draws
        .par_iter()
        .map(|d| match *d {
            Draw::Keep(i) => Ok((None, onehot(items[i].label))),
            Draw::Mix { item, partner, lambda } => {
                let a = items[item].wave;
                let b = Waveform::new(fit_length(items[partner].wave.samples(), a.len()));
                let (w, t) = mixup(a, &onehot(items[item].label), &b, &onehot(items[partner].label), lambda)?;
                Ok((Some(ModelInput::from_waveform(&w, arch)?), t))
            }
        })
        .collect::<Result<_>>()?;
    let aug: Vec<(ModelInput, ModelInput)> = triplet_draws
        .par_iter()
        .map(|&(i, j, alpha, beta)| {
            let pos = snr_mix(items[i].wave, items[j].wave, alpha)?;
            let neg = pitch_shift(items[i].wave, beta)?;
            Ok((
                ModelInput::from_waveform(&pos, arch)?,
                ModelInput::from_waveform(&neg, arch)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut inputs: Vec<ModelInput> = Vec::new();
    let mut item_row: Vec<Option<usize>> = vec![None; items.len()];
    let mut ss_rows = Vec::with_capacity(items.len());
    let mut ss_targets = Vec::with_capacity(items.len());
    for (d, (mixed, target)) in ss_draws.iter().zip(ss) {
        let row = inputs.len();
        match (d, mixed) {
            (Draw::Keep(i), _) => {
                inputs.push(items[*i].input.clone());
                item_row[*i] = Some(row);
            }
            (Draw::Mix { .. }, Some(m)) => inputs.push(m),
            (Draw::Mix { .. }, None) => unreachable!("mixed draw always yields an input"),
        }
        ss_rows.push(row);
        ss_targets.push(target);
    }
    let mut triplets = Vec::with_capacity(triplet_draws.len());
    for (&(i, ..), (pos, neg)) in triplet_draws.iter().zip(aug) {
        let a = match item_row[i] {
            Some(r) => r,
            None => {
                inputs.push(items[i].input.clone());
                item_row[i] = Some(inputs.len() - 1);
                inputs.len() - 1
            }
        };
        inputs.push(pos);
        inputs.push(neg);
        triplets.push([a, inputs.len() - 2, inputs.len() - 1]);
    }
    Ok(BatchPlan {
        inputs,
        ss_rows,
        ss_targets,
        triplets,
    })
}

/// Graph handles of a recorded batch loss.
pub struct LossGraph<T> {
    /// Subspace-loss rows of the concatenated and branch embeddings.
    pub ss_heads: [Var; 4],
    pub l_trp: Option<Var>,
    pub l_ss: Var,
    pub l_mlt: Var,
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

/// Records `L_mlt` for a planned batch. Parameter handles come from
/// [`register_params`].
pub fn combined_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    vars: &BTreeMap<String, Var>,
    plan: &BatchPlan,
    cfg: &LossConfig,
) -> Result<LossGraph<T>> {
    let refs: Vec<&ModelInput> = plan.inputs.iter().collect();
    let out = forward(g, state, vars, stack_inputs(&refs)?, BnMode::Train)?;
    let s = state.arch.sub_clusters;
    let c = state.class_count;
    let flat: Vec<T> = plan
        .ss_targets
        .iter()
        .flat_map(|t| t.iter().map(|&v| T::lit(v as f64)))
        .collect();
    let targets = Tensor::new(vec![plan.ss_rows.len(), c], flat)?;

    let zcat = g.gather_rows(out.zcat, &plan.ss_rows)?;
    let mut ss_heads = [zcat; 4];
    let fixed = g.input(state.fixed_centers.clone());
    let mut ss = scac_graph(g, zcat, fixed, state.scales[0], s, targets.clone())?;
    for b in 0..BRANCHES {
        let z = g.gather_rows(out.branches[b], &plan.ss_rows)?;
        ss_heads[b + 1] = z;
        let name = branch_center_name(b);
        let centers = *vars
            .get(&name)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("missing `{name}`")))?;
        let term = scac_graph(g, z, centers, state.scales[b + 1], s, targets.clone())?;
        ss = g.add(ss, term)?;
    }
    let l_ss = g.mean(ss);

    let (l_trp, l_mlt) = if cfg.use_triplet && !plan.triplets.is_empty() {
        let col = |k: usize| plan.triplets.iter().map(|t| t[k]).collect::<Vec<_>>();
        let za = g.gather_rows(out.zcat, &col(0))?;
        let zp = g.gather_rows(out.zcat, &col(1))?;
        let zn = g.gather_rows(out.zcat, &col(2))?;
        let per = triplet_graph(g, za, zp, zn, cfg.triplet.tau, cfg.triplet.gamma)?;
        let l_trp = g.mean(per);
        (Some(l_trp), g.add(l_trp, l_ss)?)
    } else {
        (None, l_ss)
    };
    Ok(LossGraph {
        ss_heads,
        l_trp,
        l_ss,
        l_mlt,
        batch_stats: out.batch_stats,
    })
}

/// Losses, gradients and batch-norm statistics of one training batch.
pub struct BatchLoss {
    pub terms: LossTerms,
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub batch_stats: Vec<(String, BatchStats<f32>)>,
    /// Subspace-loss embeddings per head and the dominant class of each row.
    pub ss_embeddings: [Tensor<f32>; 4],
    pub ss_labels: Vec<usize>,
}

/// Samples triplets and mixup for `items`, then evaluates and differentiates
/// `L_mlt = mean L_trp + mean L_ss`.
pub fn combined_batch_loss(
    items: &[BatchItem],
    state: &ModelState,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<BatchLoss> {
    let plan = plan_batch(items, &state.arch, state.class_count, cfg, rng)?;
    let mut g = Graph::new();
    let vars = register_params(&mut g, &state.params);
    let lg = combined_loss_graph(&mut g, state, &vars, &plan, cfg)?;
    let grads = g.backward(lg.l_mlt)?.into_named();
    let l_trp = lg.l_trp.map_or(0.0, |v| g.value(v).item() as f64);
    let l_ss = g.value(lg.l_ss).item() as f64;
    let ss_embeddings = lg.ss_heads.map(|v| g.value(v).clone());
    let ss_labels = plan
        .ss_targets
        .iter()
        .map(|t| {
            t.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect();
    Ok(BatchLoss {
        terms: LossTerms::new(l_trp, l_ss),
        grads,
        batch_stats: lg.batch_stats,
        ss_embeddings,
        ss_labels,
    })
}

/// Dynamic AdaCos scale from a batch of cosines `(N, C * S)`:
/// `ln(B_avg) / cos(min(pi / 4, theta_med))`, where `B_avg` averages the
/// summed non-target exponentials and `theta_med` is the median target angle.
pub fn adacos_scale(cos: &Tensor<f32>, labels: &[usize], sub_clusters: usize, scale: f64) -> Result<f64> {
    let (n, cs) = (cos.shape()[0], cos.shape()[1]);
    if labels.len() != n || n == 0 || cs % sub_clusters != 0 {
        return shape_err(
            "adacos scale",
            format!("cosines {:?}, {} labels", cos.shape(), labels.len()),
        );
    }
    let mut b_sum = 0.0;
    let mut angles = Vec::with_capacity(n);
    for (i, &l) in labels.iter().enumerate() {
        let row = cos.row(i);
        let mut best = f64::NEG_INFINITY;
        for (k, &c) in row.iter().enumerate() {
            if k / sub_clusters == l {
                best = best.max(c as f64);
            } else {
                b_sum += (scale * c as f64).exp();
            }
        }
        angles.push(best.clamp(-1.0, 1.0).acos());
    }
    angles.sort_by(f64::total_cmp);
    let med = angles[n / 2];
    let b_avg = b_sum / n as f64;
    Ok(b_avg.max(1e-12).ln() / med.min(std::f64::consts::FRAC_PI_4).cos())
}

/// Dynamic AdaCos scales of all four heads from one batch's subspace-loss
/// embeddings.
pub fn adaptive_scales(state: &ModelState, embeddings: &[Tensor<f32>; 4], labels: &[usize]) -> Result<[f64; 4]> {
    let s = state.arch.sub_clusters;
    let mut out = state.scales;
    for (h, z) in embeddings.iter().enumerate() {
        let centers = if h == 0 {
            state.fixed_centers.clone()
        } else {
            let name = branch_center_name(h - 1);
            state
                .params
                .get(&name)
                .cloned()
                .ok_or_else(|| crate::Error::InvalidArgument(format!("missing `{name}`")))?
        };
        let bank = SubClusterBank::new(centers, s, h > 0, state.scales[h])?;
        let n = z.shape()[0];
        let mut cos = Vec::with_capacity(n * bank.class_count() * s);
        for i in 0..n {
            for r in 0..bank.class_count() * s {
                cos.push(cosine(z.row(i), bank.centers().row(r))? as f32);
            }
        }
        let cos = Tensor::new(vec![n, bank.class_count() * s], cos)?;
        out[h] = adacos_scale(&cos, labels, s, state.scales[h])?;
    }
    Ok(out)
}
