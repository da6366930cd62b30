use std::collections::{BTreeMap, BTreeSet};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::{adamw_step, AdamW};
use crate::error::{invalid, Result};
use crate::features::Waveform;
use crate::losses::{adaptive_scales, combined_batch_loss, BatchItem, LossConfig, LossTerms};
use crate::model::{init_model, ModelInput, ModelState};

/// rng stream used for batching and augmentation; stream 0 initializes weights.
pub const TRAIN_STREAM: u64 = 1;

/// One labeled training clip.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub wave: &'a Waveform,
    pub input: &'a ModelInput,
    pub label: usize,
    /// Machine index; external clips carry the machine they were selected for.
    pub machine: usize,
    /// Original machine clips anchor triplets; external clips do not.
    pub anchor: bool,
}

impl<'a> TrainItem<'a> {
    fn batch_item(&self) -> BatchItem<'a> {
        BatchItem {
            wave: self.wave,
            input: self.input,
            label: self.label,
            machine: self.machine,
            anchor: self.anchor,
        }
    }
}

/// Mean losses over the batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_trp: f64,
    pub l_ss: f64,
    pub l_mlt: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub loss_curve: Vec<EpochLoss>,
    /// Losses of the very first batch, before any update.
    pub first_batch: Option<LossTerms>,
}

fn anchor_machines(items: &[TrainItem], idx: &[usize]) -> usize {
    idx.iter()
        .filter(|&&i| items[i].anchor)
        .map(|&i| items[i].machine)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Batch order of one epoch. Each machine's clips are shuffled and then
/// interleaved in proportion to the machine's size, so every batch sees
/// every machine in roughly its overall share. With `need_two_machines`,
/// a batch with fewer than two anchor machines is merged into a neighbor.
pub fn stratified_batches(
    items: &[TrainItem],
    batch_size: usize,
    need_two_machines: bool,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(it.machine).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(items.len());
    for (&m, idx) in groups.iter_mut() {
        idx.shuffle(rng);
        let offset: f64 = rng.gen();
        let n = idx.len() as f64;
        keyed.extend(idx.iter().enumerate().map(|(p, &i)| ((p as f64 + offset) / n, m, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if need_two_machines {
        let mut i = 0;
        while i < batches.len() && batches.len() > 1 {
            if anchor_machines(items, &batches[i]) >= 2 {
                i += 1;
                continue;
            }
            let b = batches.remove(i);
            let j = if i < batches.len() { i } else { i - 1 };
            batches[j].extend(b);
            i = i.min(j);
        }
    }
    batches
}

/// Trains a fresh model from `init_model(seed)`. With `use_triplet` the
/// objective is `L_trp + L_ss`, otherwise `L_ss` alone.
pub fn train(
    items: &[TrainItem],
    class_count: usize,
    cfg: &TrainConfig,
    use_triplet: bool,
    seed: u64,
    stage: u32,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return invalid("no training clips");
    }
    if use_triplet && anchor_machines(items, &(0..items.len()).collect::<Vec<_>>()) < 2 {
        return invalid(
            "the triplet loss needs at least two machine types: positives mix in noise from a different machine",
        );
    }
    let mut model = init_model(seed, class_count, &cfg.arch())?;
    model.stage = stage;
    let adam = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let loss_cfg = LossConfig {
        triplet: cfg.triplet,
        use_triplet,
        mixup_prob: cfg.mixup_prob,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut first_batch = None;
    for epoch in 0..cfg.epochs {
        let batches = stratified_batches(items, cfg.batch_size, use_triplet, &mut rng);
        let mut sum = [0.0f64; 3];
        for b in &batches {
            let batch: Vec<BatchItem> = b.iter().map(|&i| items[i].batch_item()).collect();
            let loss = combined_batch_loss(&batch, &model, &loss_cfg, &mut rng)?;
            first_batch.get_or_insert(loss.terms);
            adamw_step(&mut model.params, &loss.grads, &adam)?;
            model.update_running(&loss.batch_stats);
            model.renormalize_centers();
            if cfg.adaptive_scale {
                model.scales = adaptive_scales(&model, &loss.ss_embeddings, &loss.ss_labels)?;
            }
            sum[0] += loss.terms.l_trp;
            sum[1] += loss.terms.l_ss;
            sum[2] += loss.terms.l_mlt;
        }
        let n = batches.len() as f64;
        let e = EpochLoss {
            epoch,
            l_trp: sum[0] / n,
            l_ss: sum[1] / n,
            l_mlt: sum[2] / n,
        };
        info!(
            "stage {stage} epoch {}/{}: L_trp {:.4} L_ss {:.4} L_mlt {:.4}",
            epoch + 1,
            cfg.epochs,
            e.l_trp,
            e.l_ss,
            e.l_mlt
        );
        curve.push(e);
    }
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
        first_batch,
    })
}
