//! Acceptance gate. Each check compares the implementation against an
//! independent oracle or a measured trend and prints one PASS/FAIL line.
//! Checks run one after another so their wall-clock limits are meaningful.
//!
//! `ASD_ACCEPTANCE_ONLY=3,5` runs a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use asd_core::autodiff::{max_relative_error, Graph, ParamStore, Tensor};
use asd_core::cluster::{anomaly_score, kmeans, KMeansConfig, RepresentativeSet};
use asd_core::evalio::auc;
use asd_core::evalio::synth::{synthesize, SynthSpec};
use asd_core::features::{snr_mix, snr_noise_scale, TripletConfig, Waveform};
use asd_core::losses::{
    combined_loss_graph, plan_batch, scac_graph, sim_tau, triplet_loss, BatchItem, BatchPlan, LossConfig,
};
use asd_core::model::{
    forward, init_model, register_params, stack_inputs, Architecture, BnMode, ModelInput, ModelState,
};
use asd_core::pipeline::{
    run_baseline, run_stage, select_external, Corpus, LabelSource, PipelineConfig, StageArtifacts, TrainConfig,
};
use asd_core::selector::{select_pseudo_anomalous, select_random_counts, ExternalCandidate, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradients

#[derive(Clone, Copy, Debug)]
enum LossKind {
    Scac,
    Subspace,
    Triplet,
    Combined,
}

const LOSS_KINDS: [LossKind; 4] = [
    LossKind::Scac,
    LossKind::Subspace,
    LossKind::Triplet,
    LossKind::Combined,
];

fn loss_value(
    state: &ModelState<f64>,
    params: &ParamStore<f64>,
    plan: &BatchPlan,
    cfg: &LossConfig,
    kind: LossKind,
) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut g = Graph::<f64>::new();
    let vars = register_params(&mut g, params);
    let loss = match kind {
        LossKind::Scac => {
            // one branch head on its own, centers included
            let refs: Vec<&ModelInput> = plan.inputs.iter().collect();
            let out = forward(&mut g, state, &vars, stack_inputs(&refs).unwrap(), BnMode::Train).unwrap();
            let z = g.gather_rows(out.branches[0], &plan.ss_rows).unwrap();
            let flat: Vec<f64> = plan.ss_targets.iter().flatten().map(|&v| v as f64).collect();
            let t = Tensor::new(vec![plan.ss_rows.len(), state.class_count], flat).unwrap();
            let centers = vars["head0.centers"];
            let per = scac_graph(&mut g, z, centers, state.scales[1], state.arch.sub_clusters, t).unwrap();
            g.mean(per)
        }
        _ => {
            let lg = combined_loss_graph(&mut g, state, &vars, plan, cfg).unwrap();
            match kind {
                LossKind::Subspace => lg.l_ss,
                LossKind::Triplet => lg.l_trp.unwrap(),
                _ => lg.l_mlt,
            }
        }
    };
    let value = g.value(loss).item();
    (value, g.backward(loss).unwrap().into_named())
}

fn tone_clip(rng: &mut ChaCha8Rng, f: f64, len: usize) -> Waveform {
    let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    Waveform::new(
        (0..len)
            .map(|t| {
                let x = 2.0 * std::f64::consts::PI * f * t as f64 / 16000.0 + ph;
                (0.3 * x.sin() + 0.1 * (2.0 * x).sin() + rng.gen_range(-0.05..0.05)) as f32
            })
            .collect(),
    )
}

/// One trial: a small random network and batch, every loss checked on
/// sampled coordinates of every parameter tensor.
fn gradient_trial(seed: u64) -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::with_grids(&[3], [8, 8], [4, 16], 32);
    let classes = rng.gen_range(2..=3);
    let n = rng.gen_range(4..=6);
    let waves: Vec<Waveform> = (0..n)
        .map(|i| {
            let f = 150.0 + 170.0 * (i % 2) as f64 + rng.gen_range(0.0..40.0);
            tone_clip(&mut rng, f, 8000)
        })
        .collect();
    let inputs: Vec<ModelInput> = waves
        .iter()
        .map(|w| ModelInput::from_waveform(w, &arch).unwrap())
        .collect();
    let items: Vec<BatchItem> = (0..n)
        .map(|i| BatchItem {
            wave: &waves[i],
            input: &inputs[i],
            label: rng.gen_range(0..classes),
            machine: i % 2,
            anchor: true,
        })
        .collect();
    let cfg = LossConfig {
        triplet: TripletConfig::default(),
        use_triplet: true,
        mixup_prob: 0.5,
    };
    // an all-dead ReLU stack leaves a zero embedding, where normalization has
    // no derivative; such an init is redrawn
    let mut reinits = 0;
    let (state, plan) = loop {
        let state: ModelState<f64> = init_model(seed + 1000 * reinits as u64, classes, &arch).unwrap().cast();
        let plan = plan_batch(&items, &arch, classes, &cfg, &mut rng).unwrap();
        if min_branch_norm(&state, &plan) > 1e-6 {
            break (state, plan);
        }
        reinits += 1;
    };

    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for kind in LOSS_KINDS {
        let (f0, grads) = loss_value(&state, &state.params, &plan, &cfg, kind);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (name, t) in state.params.iter() {
            let mut checked = 0;
            for _ in 0..30 {
                if checked == 3 {
                    break;
                }
                let i = rng.gen_range(0..t.numel());
                let mut probe = state.params.clone();
                let orig = t.data()[i];
                probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
                let hi = loss_value(&state, &probe, &plan, &cfg, kind).0;
                probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
                let lo = loss_value(&state, &probe, &plan, &cfg, kind).0;
                // one-sided slopes that disagree mean a ReLU, max-pool or hinge
                // switches inside [x - eps, x + eps]; redraw the coordinate
                let (up, down) = ((hi - f0) / eps, (f0 - lo) / eps);
                if (up - down).abs() > 1e-2 * up.abs().max(down.abs()).max(1e-4) {
                    kinks += 1;
                    continue;
                }
                numeric.push((hi - lo) / (2.0 * eps));
                analytic.push(grads.get(name).map_or(0.0, |g| g.data()[i]));
                checked += 1;
            }
            if checked < 3 {
                // a tensor that keeps landing on kinks is reported as a failure
                worst = f64::INFINITY;
            }
        }
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    (worst, kinks, reinits)
}

fn min_branch_norm(state: &ModelState<f64>, plan: &BatchPlan) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars = register_params(&mut g, &state.params);
    let refs: Vec<&ModelInput> = plan.inputs.iter().collect();
    let out = forward(&mut g, state, &vars, stack_inputs(&refs).unwrap(), BnMode::Train).unwrap();
    out.branches
        .iter()
        .flat_map(|&b| {
            let v = g.value(b);
            let d = *v.shape().last().unwrap();
            v.data()
                .chunks(d)
                .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn check_gradients() -> Outcome {
    let trials: Vec<(f64, usize, usize)> = (0..100).map(gradient_trial).collect();
    let worst = trials.iter().map(|t| t.0).fold(0.0, f64::max);
    let bad = trials.iter().filter(|t| t.0 > 1e-3).count();
    let kinks: usize = trials.iter().map(|t| t.1).sum();
    let reinits: usize = trials.iter().map(|t| t.2).sum();
    outcome(
        bad == 0,
        format!(
            "100 trials x 4 losses, max relative error {worst:.2e}, {bad} trials above 1e-3, \
             {kinks} coordinates redrawn at kinks, {reinits} inits redrawn for a zero embedding"
        ),
    )
}

// ---------------------------------------------------------------- AUC

fn auc_oracle(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in anomalous {
        for &n in normal {
            twice += if a > n {
                2
            } else if a == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * normal.len() * anomalous.len()) as f64 * 100.0
}

fn check_auc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..200 {
        let total = rng.gen_range(2..=12);
        let n_norm = rng.gen_range(1..total);
        // coarse grid values so ties are common
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(0..6) as f64 * 0.25).collect() };
        let normal = draw(n_norm);
        let anomalous = draw(total - n_norm);
        if auc(&normal, &anomalous).unwrap() != auc_oracle(&normal, &anomalous) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("200 random score sets, {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------- k-means

fn sse(points: &[Vec<f64>], members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let dim = points[0].len();
    let mut mean = vec![0.0; dim];
    for &i in members {
        for (m, v) in mean.iter_mut().zip(&points[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= members.len() as f64);
    members
        .iter()
        .map(|&i| points[i].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

/// Lowest within-cluster sum of squares over every assignment to `k` labels.
fn optimal_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let total: f64 = (0..k)
            .map(|c| {
                let m: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                sse(points, &m)
            })
            .sum();
        best = best.min(total);
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

fn check_kmeans() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut optimal = 0;
    let mut worst_ratio = 1.0f64;
    for t in 0..50 {
        let n = rng.gen_range(2..=8);
        let k = rng.gen_range(1..=n.min(4));
        let dim = rng.gen_range(1..=3);
        let pts: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
            .collect();
        let got = kmeans(&pts, k, t, &KMeansConfig::default()).unwrap().inertia;
        let pts64: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
        let best = optimal_inertia(&pts64, k);
        let tol = 1e-6 * best.max(1e-9);
        if got <= best + tol {
            optimal += 1;
        } else {
            worst_ratio = worst_ratio.max(got / best);
        }
    }
    let pass = optimal * 10 >= 50 * 9 && worst_ratio <= 1.05;
    outcome(
        pass,
        format!("{optimal}/50 instances at the brute-force optimum, worst excess ratio {worst_ratio:.4}"),
    )
}

// ---------------------------------------------------------------- selector

fn check_selector() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut wrong = 0;
    for _ in 0..100 {
        let m_count = rng.gen_range(1..=4);
        let machines: Vec<String> = (0..m_count).map(|i| format!("m{i}")).collect();
        let pool = rng.gen_range(0..40);
        let grid = |rng: &mut ChaCha8Rng| -(rng.gen_range(0..20) as f64) * 0.05;
        let candidates: Vec<ExternalCandidate> = (0..pool)
            .map(|i| {
                let scores = machines.iter().map(|m| (m.clone(), grid(&mut rng))).collect();
                ExternalCandidate::new(format!("c{i}"), "cls", scores).unwrap()
            })
            .collect();
        let thresholds: BTreeMap<String, f64> = machines.iter().map(|m| (m.clone(), grid(&mut rng))).collect();
        let cfg = SelectionConfig {
            n_max: rng.gen_range(1..=12),
            random_baseline: false,
        };
        let sel = select_pseudo_anomalous(&candidates, &thresholds, &cfg).unwrap();

        for m in &machines {
            // oracle: own argmin machine (first name on ties), strictly below
            // threshold, then rank by (score, pool position)
            let own = |c: &ExternalCandidate| {
                let min = c.scores.values().copied().fold(f64::INFINITY, f64::min);
                c.scores
                    .iter()
                    .find(|(_, &s)| s == min)
                    .map(|(k, _)| k.clone())
                    .unwrap()
            };
            let passing: Vec<usize> = (0..pool)
                .filter(|&i| own(&candidates[i]) == *m && candidates[i].scores[m] < thresholds[m])
                .collect();
            let n_ex = passing.len().min(cfg.n_max);
            let mut want: Vec<&str> = passing
                .iter()
                .filter(|&&i| {
                    let si = candidates[i].scores[m];
                    let ahead = passing
                        .iter()
                        .filter(|&&j| {
                            let sj = candidates[j].scores[m];
                            sj < si || (sj == si && j < i)
                        })
                        .count();
                    ahead < n_ex
                })
                .map(|&i| candidates[i].clip_id.as_str())
                .collect();
            let mut got: Vec<&str> = sel.per_machine[m].iter().map(|c| c.clip_id.as_str()).collect();
            want.sort_unstable();
            got.sort_unstable();
            if got != want || sel.n_out[m] != passing.len() {
                wrong += 1;
            }
        }
    }
    outcome(
        wrong == 0,
        format!("100 random pools, {wrong} machine selections differ from the sort oracle"),
    )
}

// ---------------------------------------------------------------- formulas

fn check_formulas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut failures = Vec::new();

    let mut worst_db = 0.0f64;
    for _ in 0..50 {
        let (fa, fn_, len) = (
            rng.gen_range(100.0..2000.0),
            rng.gen_range(100.0..2000.0),
            rng.gen_range(500..6000),
        );
        let anchor = tone_clip(&mut rng, fa, 4000);
        let noise = tone_clip(&mut rng, fn_, len);
        let alpha = rng.gen_range(-5.0..20.0);
        let mixed = snr_mix(&anchor, &noise, alpha).unwrap();
        let norm = |x: &mut dyn Iterator<Item = f64>| x.map(|v| v * v).sum::<f64>().sqrt();
        let a_norm = norm(&mut anchor.samples().iter().map(|&v| v as f64));
        let tiled: Vec<f32> = noise.samples().iter().copied().cycle().take(anchor.len()).collect();
        let n_norm = norm(&mut tiled.iter().map(|&v| v as f64));
        let k = snr_noise_scale(a_norm, n_norm, alpha);
        worst_db = worst_db.max((20.0 * (a_norm / (k * n_norm)).log10() - alpha).abs());
        let added = norm(
            &mut mixed
                .samples()
                .iter()
                .zip(anchor.samples())
                .map(|(&m, &a)| m as f64 - a as f64),
        );
        worst_db = worst_db.max((20.0 * (a_norm / added).log10() - alpha).abs());
    }
    if worst_db > 1e-6 {
        failures.push(format!("snr_mix off by {worst_db:.2e} dB"));
    }

    for _ in 0..50 {
        let z: Vec<f32> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        if sim_tau(&z, &z, 0.2).unwrap() != 5.0 {
            failures.push("sim_tau(z, z, 0.2) != 5".into());
            break;
        }
        let zp: Vec<f32> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        if triplet_loss(&z, &zp, &zp, 0.2, 0.5).unwrap() != 1.5 {
            failures.push("triplet_loss with zp == zn != gamma + 1".into());
            break;
        }
        let neg: Vec<f32> = z.iter().map(|v| -v).collect();
        if triplet_loss(&z, &z, &neg, 0.2, 0.5).unwrap() != 0.0 {
            failures.push("triplet_loss best case not clamped to 0".into());
            break;
        }
        let reps = RepresentativeSet {
            machine: "m".into(),
            source: (0..4)
                .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            target: vec![z.clone()],
        };
        for r in reps.iter() {
            if anomaly_score(r, &reps).unwrap() != -1.0 {
                failures.push("anomaly_score of a representative != -1".into());
                break;
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("snr within {worst_db:.1e} dB; sim_tau, triplet bounds and representative scores exact")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

// ---------------------------------------------------------------- synthetic trend

/// Training budget for the synthetic checks; the corpus itself is the default one.
fn trend_train() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

const STAGE2_EPOCHS: usize = 10;

fn check_trend() -> Outcome {
    let spec = SynthSpec::default();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let synth = synthesize(&spec, 1000 + seed).unwrap();
        let cfg = PipelineConfig {
            seed: 10 * seed,
            stages: 2,
            train: trend_train(),
            ..PipelineConfig::default()
        };
        let corpus = Corpus::from_synth(&synth, &cfg.train.arch()).unwrap();
        let s1 = run_stage(&corpus, &cfg.stage(1), None).unwrap();
        let mut c2 = cfg.stage(2);
        c2.train.epochs = STAGE2_EPOCHS;
        let s2 = run_stage(&corpus, &c2, Some(&s1)).unwrap();
        let a1 = s1.metrics.eval.mean_auc_all;
        let a2 = s2.metrics.eval.mean_auc_all;
        println!(
            "    seed {seed}: stage 1 {a1:.2}, stage 2 {a2:.2} ({} external clips, {} classes)",
            s2.metrics.external_added, s2.metrics.class_count
        );
        rows.push((a1, a2));
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let m1 = median(rows.iter().map(|r| r.0).collect());
    let m2 = median(rows.iter().map(|r| r.1).collect());
    let worst_drop = rows.iter().map(|r| r.0 - r.1).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        m2 >= m1 && worst_drop <= 1.0,
        format!(
            "median AUC stage 1 {m1:.2} -> stage 2 {m2:.2}, worst per-seed change {:+.2}",
            -worst_drop
        ),
    )
}

// ---------------------------------------------------------------- selection vs random

fn check_selection() -> Outcome {
    let spec = SynthSpec::default();
    let synth = synthesize(&spec, 2000).unwrap();
    let near: BTreeMap<String, bool> = synth
        .external
        .iter()
        .map(|e| (e.record.id.clone().unwrap(), e.near_machine))
        .collect();
    let n_near = near.values().filter(|&&v| v).count();
    let pool = near.len();
    let cfg = PipelineConfig {
        seed: 5,
        stages: 1,
        train: trend_train(),
        ..PipelineConfig::default()
    };
    let corpus = Corpus::from_synth(&synth, &cfg.train.arch()).unwrap();
    let s1 = run_stage(&corpus, &cfg.stage(1), None).unwrap();
    let ext = select_external(
        &s1.checkpoint.model,
        &s1.checkpoint.representatives,
        &corpus,
        &SelectionConfig::default(),
        0,
    )
    .unwrap();

    // top picks: the n_near candidates with the lowest anomaly scores
    let mut ranked: Vec<&ExternalCandidate> = ext.candidates.iter().collect();
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score));
    let top_near = ranked[..n_near].iter().filter(|c| near[&c.clip_id]).count();
    let recovery = top_near as f64 / n_near as f64;
    let selected_near = ext.selection.iter().filter(|c| near[&c.clip_id]).count();

    let machines = corpus.machines();
    let counts: BTreeMap<String, usize> = machines.iter().map(|m| (m.clone(), n_near)).collect();
    let mut drawn = 0usize;
    let mut hits = 0usize;
    for seed in 0..200 {
        let sel = select_random_counts(&ext.candidates, &counts, seed).unwrap();
        drawn += sel.len();
        hits += sel.iter().filter(|c| near[&c.clip_id]).count();
    }
    let random_rate = hits as f64 / drawn as f64;
    let base = n_near as f64 / pool as f64;
    let pass = n_near == 50 && pool == 400 && recovery >= 0.8 && (random_rate - base).abs() <= 0.02;
    outcome(
        pass,
        format!(
            "score-based top {n_near}: {top_near} near-machine ({:.0}%); threshold selection kept {} clips, {selected_near} near-machine; random: {:.1}% vs base rate {:.1}%",
            100.0 * recovery,
            ext.selection.len(),
            100.0 * random_rate,
            100.0 * base
        ),
    )
}

// ---------------------------------------------------------------- baseline reduction

fn small_spec() -> SynthSpec {
    let mut spec = SynthSpec {
        train_source: 14,
        train_target: 4,
        test_per_condition: 3,
        ..SynthSpec::default()
    };
    spec.external.size = 16;
    spec
}

fn check_baseline() -> Outcome {
    let synth = synthesize(&small_spec(), 3000).unwrap();
    let train = TrainConfig {
        epochs: 2,
        batch_size: 12,
        widths: vec![4, 8],
        ..TrainConfig::default()
    };
    let cfg = PipelineConfig {
        seed: 41,
        stages: 1,
        label_source: LabelSource::MachineAttribute,
        use_triplet: false,
        use_pseudo: false,
        use_external: false,
        train: train.clone(),
        ..PipelineConfig::default()
    };
    let corpus = Corpus::from_synth(&synth, &train.arch()).unwrap();
    let stage_cfg = cfg.stage(1);
    let stage = run_stage(&corpus, &stage_cfg, None).unwrap();
    let base = run_baseline(&corpus, &train, &cfg.clusters, stage_cfg.seed).unwrap();

    let mut diffs = Vec::new();
    if stage.metrics.first_batch != base.first_batch {
        diffs.push("first-batch losses");
    }
    if stage.checkpoint.classes != base.classes {
        diffs.push("classes");
    }
    if stage.checkpoint.model.params != base.model.params || stage.checkpoint.model.running != base.model.running {
        diffs.push("trained weights");
    }
    let bits = |s: &[asd_core::evalio::ScoredClip]| {
        s.iter()
            .map(|c| (c.clip_id.clone(), c.score.to_bits()))
            .collect::<Vec<_>>()
    };
    if bits(&stage.metrics.eval.scores) != bits(&base.scores) {
        diffs.push("test scores");
    }
    let fb = base.first_batch.map(|t| format!("{:.6}", t.l_ss)).unwrap_or_default();
    outcome(
        diffs.is_empty(),
        if diffs.is_empty() {
            format!(
                "first-batch L_ss {fb}, weights and {} test scores bit-identical",
                base.scores.len()
            )
        } else {
            format!("differs in {}", diffs.join(", "))
        },
    )
}

// ---------------------------------------------------------------- determinism

fn asd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_asd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("asd runs")
}

fn check_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = toml::to_string(&small_spec()).unwrap();
    std::fs::write(root.join("spec.toml"), spec).unwrap();
    let data = root.join("data");
    let gen = asd(&[
        "gen-data",
        "--spec",
        &root.join("spec.toml").to_string_lossy(),
        "--seed",
        "9",
        "--out",
        &data.to_string_lossy(),
    ]);
    if !gen.status.success() {
        return outcome(
            false,
            format!("gen-data failed: {}", String::from_utf8_lossy(&gen.stderr)),
        );
    }
    let config = r#"
[paths]
data_root = "data"
external_root = "data"
output_root = "out"

[pipeline]
seed = 3
stages = 2

[pipeline.train]
epochs = 1
batch_size = 12
widths = [4, 8]

[pipeline.selection]
n_max = 4
random_baseline = false
"#;
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let cfg_path = root.join(format!("{run}.toml"));
        std::fs::write(&cfg_path, config.replace("\"out\"", &format!("\"out_{run}\""))).unwrap();
        let o = asd(&["iterate", "--config", &cfg_path.to_string_lossy()]);
        if !o.status.success() {
            return outcome(false, format!("iterate failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        runs.push(root.join(format!("out_{run}")));
    }
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    let mut identical = 0;
    for m in 1..=2 {
        let name = StageArtifacts::dir_name(m);
        let a = read(&runs[0].join(&name).join("metrics.json"));
        let b = read(&runs[1].join(&name).join("metrics.json"));
        if !a.is_empty() && a == b {
            identical += 1;
        }
    }
    outcome(
        identical == 2,
        format!("{identical}/2 stage metrics.json files byte-identical across two runs"),
    )
}

// ---------------------------------------------------------------- driver

struct Check {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let checks = [
        Check {
            name: "loss gradients vs finite differences",
            limit: Duration::from_secs(60),
            run: check_gradients,
        },
        Check {
            name: "auc vs exhaustive pair counting",
            limit: Duration::from_secs(5),
            run: check_auc,
        },
        Check {
            name: "k-means vs brute-force partitions",
            limit: Duration::from_secs(10),
            run: check_kmeans,
        },
        Check {
            name: "selector vs sort oracle",
            limit: Duration::from_secs(5),
            run: check_selector,
        },
        Check {
            name: "formula spot checks",
            limit: Duration::from_secs(5),
            run: check_formulas,
        },
        Check {
            name: "stage 2 >= stage 1 on synthetic data",
            limit: Duration::from_secs(15 * 60),
            run: check_trend,
        },
        Check {
            name: "score-based vs random selection",
            limit: Duration::from_secs(5 * 60),
            run: check_selection,
        },
        Check {
            name: "baseline reduction bit-for-bit",
            limit: Duration::from_secs(120),
            run: check_baseline,
        },
        Check {
            name: "iterate determinism",
            limit: Duration::from_secs(300),
            run: check_determinism,
        },
    ];
    let only: Option<Vec<usize>> = std::env::var("ASD_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, c) in checks.iter().enumerate() {
        let idx = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&idx)) {
            continue;
        }
        println!("[{idx}/9] {} ...", c.name);
        let t = Instant::now();
        let o = (c.run)();
        let took = t.elapsed();
        let in_time = took <= c.limit;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{idx}/9] {}: {} ({:.1}s, limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            o.detail,
            took.as_secs_f64(),
            c.limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
