//! The attribute-labeled baseline on its own: subspace loss with mixup,
//! source/target representatives, cosine scoring. No triplets, pseudo-labels
//! or external data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ClusterConfig, TrainConfig};
use super::data::Corpus;
use super::stage::{representatives, score_clips};
use super::train::{stratified_batches, TrainItem, TRAIN_STREAM};
use crate::autodiff::{adamw_step, AdamW};
use crate::error::{invalid, Result};
use crate::evalio::ScoredClip;
use crate::losses::{combined_batch_loss, BatchItem, LossConfig, LossTerms};
use crate::model::{init_model, ModelState};

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub model: ModelState,
    pub classes: Vec<String>,
    pub first_batch: Option<LossTerms>,
    pub scores: Vec<ScoredClip>,
}

pub fn run_baseline(corpus: &Corpus, cfg: &TrainConfig, clusters: &ClusterConfig, seed: u64) -> Result<BaselineRun> {
    let mut labels = Vec::with_capacity(corpus.train.len());
    for c in &corpus.train {
        let Some(a) = &c.record.attribute else {
            return invalid(format!("clip `{}` has no attribute label", c.record.id));
        };
        labels.push(format!("{}_{a}", c.record.machine));
    }
    let mut classes = labels.clone();
    classes.sort();
    classes.dedup();
    let machines = corpus.machines();
    let items: Vec<TrainItem> = corpus
        .train
        .iter()
        .zip(&labels)
        .map(|(c, l)| TrainItem {
            wave: &c.wave,
            input: &c.input,
            label: classes.binary_search(l).expect("label listed"),
            machine: machines.binary_search(&c.record.machine).expect("machine listed"),
            anchor: true,
        })
        .collect();

    let mut model = init_model(seed, classes.len(), &cfg.arch())?;
    model.stage = 1;
    let adam = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let loss_cfg = LossConfig {
        triplet: cfg.triplet,
        use_triplet: false,
        mixup_prob: cfg.mixup_prob,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    let mut first_batch = None;
    for _ in 0..cfg.epochs {
        for b in stratified_batches(&items, cfg.batch_size, false, &mut rng) {
            let batch: Vec<BatchItem> = b
                .iter()
                .map(|&i| BatchItem {
                    wave: items[i].wave,
                    input: items[i].input,
                    label: items[i].label,
                    machine: items[i].machine,
                    anchor: true,
                })
                .collect();
            let loss = combined_batch_loss(&batch, &model, &loss_cfg, &mut rng)?;
            first_batch.get_or_insert(loss.terms);
            adamw_step(&mut model.params, &loss.grads, &adam)?;
            model.update_running(&loss.batch_stats);
            model.renormalize_centers();
        }
    }
    let reps = representatives(&model, &corpus.train, clusters, seed)?;
    let scores = score_clips(&model, &reps, &corpus.test)?;
    Ok(BaselineRun {
        model,
        classes,
        first_batch,
        scores,
    })
}
