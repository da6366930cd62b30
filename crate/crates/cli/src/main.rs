//! `asd`: synthetic data, training, selection, pseudo-labels and scoring
//! from the command line.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for
//! usage and configuration errors.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use asd_core::checkpoint::Checkpoint;
use asd_core::evalio::{
    evaluate_scores, generate_synthetic_corpus, read_manifest, scores_from_tsv, scores_to_tsv, EvalReport, Split,
    SynthSpec,
};
use asd_core::pipeline::{
    iterate, load_clips, pseudo_label, run_stage, score_clips, select_external, summary_table, Corpus, StageArtifacts,
};
use clap::{Args, Parser, Subcommand};
use log::info;

use config::{load_spec, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "asd", version, about = "Anomalous sound detection without attribute labels")]
struct Cli {
    /// Worker threads for feature extraction and scoring (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with manifests.
    GenData {
        /// Corpus spec (TOML or JSON); the built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage; stage M > 1 reads stage M-1 from the output root.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        stage: u32,
    },
    /// Select pseudo-anomalous external clips with a trained checkpoint.
    SelectExternal {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Selection table; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign k-means pseudo-labels to the training clips.
    PseudoLabel {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run stages 1..M_max.
    Iterate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score the test clips of a manifest.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-machine AUCs from a score table or from a checkpoint and manifest.
    Evaluate {
        #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
        scores: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        manifest: Option<PathBuf>,
        /// Report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(&self.config).map_err(usage)?;
        cfg.apply(&self.overrides);
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn load_corpus(cfg: &RunConfig, with_external: bool) -> Result<Corpus, Failure> {
    let ext = if with_external { cfg.external_manifest() } else { None };
    Corpus::load(&cfg.paths.data_root, ext.as_deref(), &cfg.pipeline.train.arch())
        .with_context(|| format!("loading corpus from {}", cfg.paths.data_root.display()))
        .map_err(runtime)
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text)
            .with_context(|| format!("cannot write {}", p.display()))
            .map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(p)
        .with_context(|| format!("loading checkpoint {}", p.display()))
        .map_err(runtime)
}

fn gen_data(spec: Option<&Path>, seed: u64, out: &Path) -> Outcome {
    let spec = match spec {
        Some(p) => load_spec(p).map_err(usage)?,
        None => SynthSpec::default(),
    };
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(runtime)?;
    let summary = generate_synthetic_corpus(&spec, seed, out)
        .with_context(|| format!("writing corpus to {}", out.display()))
        .map_err(runtime)?;
    println!("{summary}");
    println!(
        "manifests: train.jsonl, test.jsonl, external.jsonl in {}",
        out.display()
    );
    Ok(())
}

fn train_stage(run: &RunArgs, stage: u32) -> Outcome {
    let cfg = run.load()?;
    if stage == 0 {
        return Err(usage(anyhow!("stage index starts at 1")));
    }
    let prev = if stage > 1 {
        let dir = cfg.paths.output_root.join(StageArtifacts::dir_name(stage - 1));
        Some(
            StageArtifacts::read(&dir)
                .with_context(|| format!("stage {stage} needs {}", dir.display()))
                .map_err(runtime)?,
        )
    } else {
        None
    };
    let corpus = load_corpus(&cfg, stage > 1 && cfg.pipeline.use_external)?;
    let art = run_stage(&corpus, &cfg.pipeline.stage(stage), prev.as_ref())
        .with_context(|| format!("stage {stage} failed"))
        .map_err(runtime)?;
    let dir = art.write(&cfg.paths.output_root).map_err(runtime)?;
    print!("{}", summary_table(std::slice::from_ref(&art)));
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_select_external(run: &RunArgs, checkpoint: &Path, out: Option<&Path>) -> Outcome {
    let cfg = run.load()?;
    if cfg.paths.external_root.is_none() {
        return Err(usage(anyhow!("select-external needs paths.external_root")));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(&cfg, true)?;
    let sel = select_external(
        &ckpt.model,
        &ckpt.representatives,
        &corpus,
        &cfg.pipeline.selection,
        cfg.pipeline.seed,
    )
    .map_err(runtime)?;
    for (m, n) in &sel.selection.n_out {
        info!("{m}: threshold {:.6}, {n} below", sel.thresholds[m]);
    }
    emit(out, &sel.selection.to_tsv())
}

fn cmd_pseudo_label(run: &RunArgs, checkpoint: &Path, out: Option<&Path>) -> Outcome {
    let cfg = run.load()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(&cfg, false)?;
    let table = pseudo_label(&ckpt.model, &corpus.train, &cfg.pipeline.clusters, cfg.pipeline.seed).map_err(runtime)?;
    emit(out, &table.to_tsv())
}

fn cmd_iterate(run: &RunArgs) -> Outcome {
    let cfg = run.load()?;
    let corpus = load_corpus(&cfg, cfg.pipeline.use_external && cfg.pipeline.stages > 1)?;
    let stages = iterate(&corpus, &cfg.pipeline, Some(&cfg.paths.output_root)).map_err(runtime)?;
    print!("{}", summary_table(&stages));
    Ok(())
}

fn scored_test_clips(checkpoint: &Path, manifest: &Path) -> Result<Vec<asd_core::evalio::ScoredClip>, Failure> {
    let ckpt = load_checkpoint(checkpoint)?;
    let records: Vec<_> = read_manifest(manifest)
        .with_context(|| format!("reading {}", manifest.display()))
        .map_err(runtime)?
        .into_iter()
        .filter(|r| r.split == Split::Test)
        .collect();
    let root = manifest.parent().unwrap_or(Path::new("."));
    let clips = load_clips(&records, root, &ckpt.model.arch).map_err(runtime)?;
    score_clips(&ckpt.model, &ckpt.representatives, &clips).map_err(runtime)
}

fn print_report(r: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    println!("machine\tauc_all\tauc_source\tauc_target");
    for m in &r.machines {
        println!(
            "{}\t{:.2}\t{}\t{}",
            m.machine,
            m.auc_all,
            opt(m.auc_source),
            opt(m.auc_target)
        );
    }
    println!("mean\t{:.2}", r.mean_auc_all);
}

fn cmd_evaluate(
    scores: Option<&Path>,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> Outcome {
    let scored = match (scores, checkpoint, manifest) {
        (Some(s), _, _) => {
            let text = std::fs::read_to_string(s)
                .with_context(|| format!("cannot read {}", s.display()))
                .map_err(usage)?;
            scores_from_tsv(&text).map_err(runtime)?
        }
        (None, Some(c), Some(m)) => scored_test_clips(c, m)?,
        _ => {
            return Err(usage(anyhow!(
                "evaluate needs --scores, or --checkpoint with --manifest"
            )))
        }
    };
    let report = evaluate_scores(&scored).map_err(runtime)?;
    print_report(&report);
    if let Some(p) = out {
        let json = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
        std::fs::write(p, json)
            .with_context(|| format!("cannot write {}", p.display()))
            .map_err(runtime)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    match &cli.command {
        Command::GenData { spec, seed, out } => gen_data(spec.as_deref(), *seed, out),
        Command::Train { run, stage } => train_stage(run, *stage),
        Command::SelectExternal { run, checkpoint, out } => cmd_select_external(run, checkpoint, out.as_deref()),
        Command::PseudoLabel { run, checkpoint, out } => cmd_pseudo_label(run, checkpoint, out.as_deref()),
        Command::Iterate { run } => cmd_iterate(run),
        Command::Score {
            checkpoint,
            manifest,
            out,
        } => {
            let scored = scored_test_clips(checkpoint, manifest)?;
            emit(out.as_deref(), &scores_to_tsv(&scored))
        }
        Command::Evaluate {
            scores,
            checkpoint,
            manifest,
            out,
        } => cmd_evaluate(
            scores.as_deref(),
            checkpoint.as_deref(),
            manifest.as_deref(),
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
