//! `vito`: corpus generation, curation, contrastive video pretraining,
//! probing, the evaluation protocols, and a single-config pipeline that
//! chains them end to end.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Role;

#[derive(Parser)]
#[command(
    name = "vito",
    version,
    about = "Video pretraining lab on synthetic corpora"
)]
struct Cli {
    /// Worker threads for data-parallel stages; VITO_LAB_WORKERS is the
    /// fallback when the flag is absent.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video corpus (frames, masks, manifest).
    GenData {
        /// Run config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Root seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Corpus directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Split to draw: train keeps tag noise, probe and eval are clean.
        #[arg(long, value_enum, default_value_t = Role::Train)]
        role: Role,
        /// Clip count override for the chosen split.
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Filter a corpus with a frame classifier and record the decisions.
    Curate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Corpus directory holding the clips.
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus manifest file; defaults to manifest.json in the corpus.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Saved classifier bundle directory; a label oracle when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Frames scored per clip.
        #[arg(long)]
        k: Option<usize>,
        /// Minimum clip duration in seconds.
        #[arg(long)]
        min_duration: Option<f64>,
        /// Curation manifest output file.
        #[arg(long)]
        out: PathBuf,
        /// Also write the filtered corpus manifest here.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Pretrain the encoder on a corpus with the multi-view objective.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus manifest override (a curated manifest, for example).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Run directory for checkpoints and the step log.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Append per-clip augmentation provenance records to this JSONL file.
        #[arg(long)]
        log_augment: Option<PathBuf>,
    },
    /// Train a linear probe on frozen features and score a held-out corpus.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Labeled corpus the probe trains on.
        #[arg(long)]
        corpus: PathBuf,
        /// Labeled corpus the probe is scored on.
        #[arg(long)]
        eval_corpus: PathBuf,
        /// Pretraining checkpoint; a seeded random encoder when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Save encoder plus trained head as a classifier bundle.
        #[arg(long)]
        save_classifier: Option<PathBuf>,
    },
    /// Propagate first-frame masks through feature space and score J and F.
    EvalSeg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corpus: PathBuf,
        /// Pretraining checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score saliency-map mass on primary sprites against distractors.
    EvalSaliency {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corpus: PathBuf,
        /// Pretraining checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare classifier decisions with the shape oracle on cue-conflict,
    /// low-pass, noise and edge stimuli.
    EvalConsistency {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Classifier bundle directory (encoder plus trained head).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy retention curves under frame corruptions.
    EvalRobust {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corpus: PathBuf,
        /// Classifier bundle directory (encoder plus trained head).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clip-level classification under each temporal pooling mode.
    EvalClip {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Labeled corpus the clip probe trains on.
        #[arg(long)]
        corpus: PathBuf,
        /// Labeled corpus the clip probe is scored on.
        #[arg(long)]
        eval_corpus: PathBuf,
        /// Pretraining checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient audit of every op and the whole graph.
    Gradcheck {
        /// Seed for the sampled parameter draws.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full chain: generate corpora, bootstrap a curation classifier,
    /// curate, pretrain, probe, and run every evaluation.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for corpora, checkpoints and reports.
        #[arg(long)]
        out: PathBuf,
        /// Append augmentation provenance records to this JSONL file.
        #[arg(long)]
        log_augment: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    commands::init_workers(cli.workers)?;
    match cli.command {
        Command::GenData {
            config,
            seed,
            out,
            role,
            clips,
        } => commands::gen_data(config.as_deref(), seed, &out, role, clips),
        Command::Curate {
            config,
            seed,
            corpus,
            manifest,
            checkpoint,
            k,
            min_duration,
            out,
            apply,
        } => commands::curate(
            config.as_deref(),
            seed,
            &corpus,
            manifest.as_deref(),
            checkpoint.as_deref(),
            k,
            min_duration,
            &out,
            apply.as_deref(),
        ),
        Command::Pretrain {
            config,
            seed,
            corpus,
            manifest,
            out,
            resume,
            log_augment,
        } => commands::pretrain(
            config.as_deref(),
            seed,
            &corpus,
            manifest.as_deref(),
            &out,
            resume.as_deref(),
            log_augment.as_deref(),
        ),
        Command::Probe {
            config,
            seed,
            corpus,
            eval_corpus,
            checkpoint,
            out,
            save_classifier,
        } => commands::probe(
            config.as_deref(),
            seed,
            &corpus,
            &eval_corpus,
            checkpoint.as_deref(),
            &out,
            save_classifier.as_deref(),
        ),
        Command::EvalSeg {
            config,
            seed,
            corpus,
            checkpoint,
            out,
        } => commands::eval_seg(config.as_deref(), seed, &corpus, &checkpoint, &out),
        Command::EvalSaliency {
            config,
            seed,
            corpus,
            checkpoint,
            out,
        } => commands::eval_saliency(config.as_deref(), seed, &corpus, &checkpoint, &out),
        Command::EvalConsistency {
            config,
            seed,
            checkpoint,
            out,
        } => commands::eval_consistency(config.as_deref(), seed, &checkpoint, &out),
        Command::EvalRobust {
            config,
            seed,
            corpus,
            checkpoint,
            out,
        } => commands::eval_robust(config.as_deref(), seed, &corpus, &checkpoint, &out),
        Command::EvalClip {
            config,
            seed,
            corpus,
            eval_corpus,
            checkpoint,
            out,
        } => commands::eval_clip(
            config.as_deref(),
            seed,
            &corpus,
            &eval_corpus,
            &checkpoint,
            &out,
        ),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Pipeline {
            config,
            seed,
            out,
            log_augment,
        } => {
            let cfg = config::RunConfig::load(config.as_deref(), seed)?;
            pipeline::run(&cfg, &out, log_augment.as_deref())
        }
    }
}
