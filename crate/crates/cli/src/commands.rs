//! One function per subcommand. Each loads the run config, resolves seeds,
//! does its work through vito-core, and writes the resolved config next to
//! its outputs.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use vito_core::curation::{apply_curation, curate as curate_corpus, OracleClassifier};
use vito_core::datagen::{gen_corpus, CorpusManifest};
use vito_core::evalharness::clip::{evaluate_clip_classification, PoolMode};
use vito_core::evalharness::consistency::{evaluate_consistency, shape_bias_stimuli};
use vito_core::evalharness::probe::{evaluate_probe, ClassifierBundle};
use vito_core::evalharness::robust::robustness_curve;
use vito_core::evalharness::saliency::evaluate_saliency;
use vito_core::evalharness::seg::evaluate_segmentation;
use vito_core::evalharness::{featurize_corpus, MetricsReport};
use vito_core::model::{init_params, verify_graph_gradients, ModelConfig, Params};
use vito_core::tensor::{check_all_ops, GradCheckOptions};
use vito_core::trainer::{load_checkpoint, run_pretraining};

use crate::config::{resolved_config_path, stream, RunConfig};

/// Set up the global worker pool from the flag or VITO_LAB_WORKERS.
pub fn init_workers(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("VITO_LAB_WORKERS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .with_context(|| format!("VITO_LAB_WORKERS: bad thread count {v:?}"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("workers must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("set worker pool")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Train,
    Probe,
    Eval,
}

pub fn gen_data(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    role: Role,
    clips: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    let (gen, default_clips, stream_id) = match role {
        Role::Train => (cfg.data.gen.clone(), cfg.data.train_clips, stream::GEN_TRAIN),
        Role::Probe => (cfg.clean_gen(), cfg.data.probe_clips, stream::GEN_PROBE),
        Role::Eval => (cfg.clean_gen(), cfg.data.eval_clips, stream::GEN_EVAL),
    };
    let n = clips.unwrap_or(default_clips);
    let manifest = gen_corpus(&gen, n, out, cfg.stage_seed(stream_id))?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    println!(
        "generated {} clips into {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn load_manifest(corpus: &Path, manifest: Option<&Path>) -> Result<CorpusManifest> {
    Ok(match manifest {
        Some(p) => CorpusManifest::load_file(p, corpus)?,
        None => CorpusManifest::load(corpus)?,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn curate(
    config: Option<&Path>,
    seed: Option<u64>,
    corpus: &Path,
    manifest: Option<&Path>,
    checkpoint: Option<&Path>,
    k: Option<usize>,
    min_duration: Option<f64>,
    out: &Path,
    apply: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    let mut params = cfg.curation.clone();
    if let Some(k) = k {
        params.k_frames = k;
    }
    if let Some(d) = min_duration {
        params.min_duration_s = d;
    }
    let man = load_manifest(corpus, manifest)?;
    let report = match checkpoint {
        Some(dir) => {
            let bundle = ClassifierBundle::load(dir)?;
            curate_corpus(corpus, &man, &bundle, &params)?
        }
        None => {
            let oracle = OracleClassifier {
                n_classes: man.categories.len(),
            };
            curate_corpus(corpus, &man, &oracle, &params)?
        }
    };
    report.save(out)?;
    if let Some(apply_path) = apply {
        let curated = apply_curation(&man, &report)?;
        curated.save_file(apply_path)?;
    }
    cfg.save_resolved(&resolved_config_path(out, false))?;
    println!(
        "kept {}/{} clips (retention {:.4}) -> {}",
        report.kept,
        report.total,
        report.retention,
        out.display()
    );
    Ok(())
}

pub fn pretrain(
    config: Option<&Path>,
    seed: Option<u64>,
    corpus: &Path,
    manifest: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    log_augment: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    let outcome = run_pretraining(corpus, out, &cfg.pretrain, resume, manifest, log_augment)?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        outcome.steps_run,
        outcome.final_loss,
        outcome.checkpoint_dir.display()
    );
    Ok(())
}

/// Online-branch parameters from a checkpoint, or a seeded random encoder.
fn load_encoder(
    model: &ModelConfig,
    checkpoint: Option<&Path>,
    random_seed: u64,
) -> Result<Params<f32>> {
    match checkpoint {
        Some(dir) => {
            let (state, _velocity, _header) = load_checkpoint(dir, model.clone(), None)?;
            Ok(state.online)
        }
        None => Ok(init_params(model, random_seed)?),
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serialize report")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("write {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
pub fn probe(
    config: Option<&Path>,
    seed: Option<u64>,
    corpus: &Path,
    eval_corpus: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    save_classifier: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let model = cfg.pretrain.model.clone();
    let params = load_encoder(&model, checkpoint, cfg.stage_seed(stream::RANDOM_ENCODER))?;
    let man = CorpusManifest::load(corpus)?;
    let eval_man = CorpusManifest::load(eval_corpus)?;
    let train = featurize_corpus(
        &model,
        &params,
        corpus,
        &man,
        cfg.probe.frames_per_clip,
        cfg.stage_seed(stream::PROBE_FRAMES),
        cfg.probe.batch,
    )?;
    let eval = evaluate_probe(
        &model,
        &params,
        &train,
        eval_corpus,
        &eval_man,
        cfg.probe.frames_per_clip,
        &cfg.probe.config,
        cfg.stage_seed(stream::PROBE_FRAMES),
    )?;
    if let Some(dir) = save_classifier {
        ClassifierBundle {
            config: model.clone(),
            params: params.clone(),
            head: eval.outcome.head.clone(),
        }
        .save(dir)?;
    }
    let mut metrics = MetricsReport::new();
    metrics.push("probe/eval_accuracy", eval.eval_accuracy);
    metrics.push("probe/val_accuracy", eval.outcome.val_accuracy);
    metrics.push("probe/best_lr", eval.outcome.best_lr);
    metrics.save_jsonl(&out.join("metrics.jsonl"))?;
    write_json(
        &out.join("probe.json"),
        &serde_json::json!({
            "best_lr": eval.outcome.best_lr,
            "val_accuracy": eval.outcome.val_accuracy,
            "eval_accuracy": eval.eval_accuracy,
            "train_rows": eval.train_rows,
            "eval_rows": eval.eval_rows,
            "sweep": eval.outcome.sweep,
        }),
    )?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    println!(
        "probe eval accuracy {:.4} (val {:.4}, lr {})",
        eval.eval_accuracy, eval.outcome.val_accuracy, eval.outcome.best_lr
    );
    Ok(())
}

pub fn eval_seg(
    config: Option<&Path>,
    seed: Option<u64>,
    corpus: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let model = cfg.pretrain.model.clone();
    let params = load_encoder(&model, Some(checkpoint), 0)?;
    let man = CorpusManifest::load(corpus)?;
    let s = &cfg.eval.seg;
    let report = evaluate_segmentation(
        &model,
        &params,
        corpus,
        &man,
        s.tap,
        &s.propagation,
        s.boundary_tolerance,
        s.max_clips,
    )?;
    let mut metrics = MetricsReport::new();
    metrics.push("seg/j_mean", report.j_mean);
    metrics.push("seg/f_mean", report.f_mean);
    metrics.push("seg/jf_mean", 0.5 * (report.j_mean + report.f_mean));
    metrics.save_jsonl(&out.join("metrics.jsonl"))?;
    write_json(&out.join("seg.json"), &report)?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    println!(
        "seg J {:.4} F {:.4} over {} clips ({} skipped)",
        report.j_mean, report.f_mean, report.scored_clips, report.skipped_clips
    );
    Ok(())
}

pub fn eval_saliency(
    config: Option<&Path>,
    seed: Option<u64>,
    corpus: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let model = cfg.pretrain.model.clone();
    let params = load_encoder(&model, Some(checkpoint), 0)?;
    let man = CorpusManifest::load(corpus)?;
    let report = evaluate_saliency(&model, &params, corpus, &man, cfg.eval.saliency.max_clips)?;
    let mut metrics = MetricsReport::new();
    metrics.push("saliency/primary_wins", report.primary_wins);
    metrics.push("saliency/mean_alignment", report.mean_alignment);
    metrics.push("saliency/mean_primary_density", report.mean_primary_density);
    metrics.push(
        "saliency/mean_distractor_density",
        report.mean_distractor_density,
    );
    metrics.save_jsonl(&out.join("metrics.jsonl"))?;
    write_json(&out.join("saliency.json"), &report)?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    println!(
        "saliency primary wins {:.4} over {} clips ({} skipped)",
        report.primary_wins, report.scored_clips, report.skipped_clips
    );
    Ok(())
}

pub fn eval_consistency(
    config: Option<&Path>,
    seed: Option<u64>,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let bundle = ClassifierBundle::load(checkpoint)?;
    let stimuli = shape_bias_stimuli(
        &cfg.clean_gen(),
        cfg.eval.consistency.n_per_condition,
        bundle.config.input_size,
        cfg.stage_seed(stream::STIMULI),
    )?;
    let report = evaluate_consistency(&bundle.config, &bundle.params, &bundle.head, &stimuli)?;
    let mut metrics = MetricsReport::new();
    metrics.push(
        "consistency/accuracy_difference",
        report.accuracy_difference,
    );
    metrics.push("consistency/model_accuracy", report.pooled.p_model);
    metrics.push("consistency/reference_accuracy", report.pooled.p_reference);
    metrics.push("consistency/observed_agreement", report.pooled.c_obs);
    if let Some(kappa) = report.pooled.kappa {
        metrics.push("consistency/kappa", kappa);
    }
    for (name, stats) in &report.per_condition {
        if let Some(kappa) = stats.kappa {
            metrics.push(format!("consistency/kappa/{name}"), kappa);
        }
    }
    metrics.save_jsonl(&out.join("metrics.jsonl"))?;
    write_json(&out.join("consistency.json"), &report)?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    println!(
        "consistency gap {:.4}, agreement {:.4} over {} stimuli",
        report.accuracy_difference, report.pooled.c_obs, report.pooled.n
    );
    Ok(())
}

pub fn eval_robust(
    config: Option<&Path>,
    seed: Option<u64>,
    corpus: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let bundle = ClassifierBundle::load(checkpoint)?;
    let man = CorpusManifest::load(corpus)?;
    let curve = robustness_curve(
        &bundle.config,
        &bundle.params,
        &bundle.head,
        corpus,
        &man,
        cfg.eval.robust.frames_per_clip,
        cfg.eval.robust.max_clips,
        cfg.stage_seed(stream::ROBUST),
    )?;
    let mut metrics = MetricsReport::new();
    metrics.push("robust/clean_accuracy", curve.clean_accuracy);
    for (s, delta) in curve.delta.iter().enumerate().skip(1) {
        metrics.push(format!("robust/delta_s{s}"), *delta);
    }
    metrics.save_jsonl(&out.join("metrics.jsonl"))?;
    write_json(&out.join("robust.json"), &curve)?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    println!(
        "robust clean accuracy {:.4}, worst delta {:.4} over {} frames",
        curve.clean_accuracy,
        curve.delta.iter().cloned().fold(0.0, f64::max),
        curve.n
    );
    Ok(())
}

pub fn eval_clip(
    config: Option<&Path>,
    seed: Option<u64>,
    corpus: &Path,
    eval_corpus: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let model = cfg.pretrain.model.clone();
    let params = load_encoder(&model, Some(checkpoint), 0)?;
    let man = CorpusManifest::load(corpus)?;
    let eval_man = CorpusManifest::load(eval_corpus)?;
    let mut metrics = MetricsReport::new();
    let mut reports = Vec::new();
    for mode in PoolMode::ALL {
        let report = evaluate_clip_classification(
            &model,
            &params,
            corpus,
            &man,
            eval_corpus,
            &eval_man,
            mode,
            cfg.eval.clip.frames_per_clip,
            &cfg.probe.config,
            cfg.stage_seed(stream::CLIP_EVAL),
        )?;
        metrics.push(
            format!("clip/{}/eval_accuracy", mode.name()),
            report.eval_accuracy,
        );
        metrics.push(
            format!("clip/{}/val_accuracy", mode.name()),
            report.val_accuracy,
        );
        println!(
            "clip {} eval accuracy {:.4} (dim {})",
            mode.name(),
            report.eval_accuracy,
            report.dim
        );
        reports.push(report);
    }
    metrics.save_jsonl(&out.join("metrics.jsonl"))?;
    write_json(&out.join("clip.json"), &reports)?;
    cfg.save_resolved(&resolved_config_path(out, true))?;
    Ok(())
}

/// Full-structure sizing for the whole-graph check: multiple strided
/// stages, both attention taps, and the projector, at widths where the
/// f64 finite-difference sweep stays well under a minute.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        stage_widths: vec![4, 6],
        stage_strides: vec![2, 2],
        kernel: 3,
        scale_taps: 2,
        attention: true,
        attn_hidden: 6,
        proj_hidden: 12,
        proj_dim: 8,
        normalize: true,
        temperature: 0.2,
    }
}

pub fn gradcheck(seed: Option<u64>) -> Result<()> {
    let mut opts = GradCheckOptions::default();
    if let Some(s) = seed {
        opts.seed = s;
    }
    let mut max_err = 0.0f64;
    let mut worst = "none";
    let mut elements = 0usize;
    let mut failed = 0usize;
    for check in check_all_ops(&opts)? {
        println!(
            "op {:<18} max rel err {:.3e} over {} elements",
            check.op, check.report.max_rel_err, check.report.elements_checked
        );
        elements += check.report.elements_checked;
        failed += check.report.failures.len();
        if check.report.max_rel_err > max_err {
            max_err = check.report.max_rel_err;
            worst = check.op;
        }
    }
    let graph = verify_graph_gradients(&gradcheck_model(), 3, 4, 0.2, &opts)?;
    println!(
        "op {:<18} max rel err {:.3e} over {} elements",
        "full graph", graph.max_rel_err, graph.elements_checked
    );
    elements += graph.elements_checked;
    failed += graph.failures.len();
    if graph.max_rel_err > max_err {
        max_err = graph.max_rel_err;
        worst = "full graph";
    }
    println!("gradcheck: max rel err {max_err:.3e} over {elements} elements");
    if failed > 0 || max_err >= opts.tol {
        bail!("gradient check failed: max rel err {max_err:.3e} at {worst}");
    }
    Ok(())
}
