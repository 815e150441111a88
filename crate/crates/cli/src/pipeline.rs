//! End-to-end run from one config: corpora, bootstrap classifier, curation,
//! pretraining, probe, every evaluation protocol, and one combined metrics
//! report. All stage seeds derive from the root seed, so rerunning with the
//! same config reproduces every output byte for byte.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use vito_core::curation::{apply_curation, curate};
use vito_core::datagen::gen_corpus;
use vito_core::evalharness::clip::{evaluate_clip_classification, PoolMode};
use vito_core::evalharness::consistency::{evaluate_consistency, shape_bias_stimuli};
use vito_core::evalharness::probe::{evaluate_probe, ClassifierBundle};
use vito_core::evalharness::robust::robustness_curve;
use vito_core::evalharness::saliency::evaluate_saliency;
use vito_core::evalharness::seg::evaluate_segmentation;
use vito_core::evalharness::{featurize_corpus, MetricsReport};
use vito_core::model::init_params;
use vito_core::trainer::{load_checkpoint, run_pretraining};

use crate::commands::write_json;
use crate::config::{stream, RunConfig};

fn stage(name: &str) {
    eprintln!("[pipeline] {name}");
}

pub fn run(cfg: &RunConfig, out: &Path, log_augment: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    cfg.save_resolved(&out.join("config.resolved.json"))?;
    let model = cfg.pretrain.model.clone();

    // Three splits: noisy-tag train, labeled probe, labeled eval.
    stage("generate corpora");
    let train_dir = out.join("corpus/train");
    let probe_dir = out.join("corpus/probe");
    let eval_dir = out.join("corpus/eval");
    let train_man = gen_corpus(
        &cfg.data.gen,
        cfg.data.train_clips,
        &train_dir,
        cfg.stage_seed(stream::GEN_TRAIN),
    )?;
    let clean = cfg.clean_gen();
    let probe_man = gen_corpus(
        &clean,
        cfg.data.probe_clips,
        &probe_dir,
        cfg.stage_seed(stream::GEN_PROBE),
    )?;
    let eval_man = gen_corpus(
        &clean,
        cfg.data.eval_clips,
        &eval_dir,
        cfg.stage_seed(stream::GEN_EVAL),
    )?;

    // Bootstrap classifier: linear head over the frozen random encoder,
    // trained on the labeled probe split, never on curated output. It
    // filters the train corpus and doubles as the random-encoder baseline.
    stage("bootstrap classifier");
    let random_params = init_params(&model, cfg.stage_seed(stream::RANDOM_ENCODER))?;
    let boot_train = featurize_corpus(
        &model,
        &random_params,
        &probe_dir,
        &probe_man,
        cfg.probe.frames_per_clip,
        cfg.stage_seed(stream::PROBE_FRAMES),
        cfg.probe.batch,
    )?;
    let boot = evaluate_probe(
        &model,
        &random_params,
        &boot_train,
        &eval_dir,
        &eval_man,
        cfg.probe.frames_per_clip,
        &cfg.probe.config,
        cfg.stage_seed(stream::PROBE_FRAMES),
    )?;
    let bootstrap = ClassifierBundle {
        config: model.clone(),
        params: random_params,
        head: boot.outcome.head.clone(),
    };
    bootstrap.save(&out.join("bootstrap"))?;

    stage("curate");
    let curation = curate(&train_dir, &train_man, &bootstrap, &cfg.curation)?;
    curation.save(&out.join("curation.json"))?;
    let curated = apply_curation(&train_man, &curation)?;
    let curated_path = out.join("curated.manifest.json");
    curated.save_file(&curated_path)?;

    stage("pretrain");
    let outcome = run_pretraining(
        &train_dir,
        &out.join("pretrain"),
        &cfg.pretrain,
        None,
        Some(&curated_path),
        log_augment,
    )?;
    let (state, _velocity, _header) = load_checkpoint(&outcome.checkpoint_dir, model.clone(), None)?;
    let params = state.online;

    stage("probe");
    let train = featurize_corpus(
        &model,
        &params,
        &probe_dir,
        &probe_man,
        cfg.probe.frames_per_clip,
        cfg.stage_seed(stream::PROBE_FRAMES),
        cfg.probe.batch,
    )?;
    let probe = evaluate_probe(
        &model,
        &params,
        &train,
        &eval_dir,
        &eval_man,
        cfg.probe.frames_per_clip,
        &cfg.probe.config,
        cfg.stage_seed(stream::PROBE_FRAMES),
    )?;
    let classifier = ClassifierBundle {
        config: model.clone(),
        params: params.clone(),
        head: probe.outcome.head.clone(),
    };
    classifier.save(&out.join("classifier"))?;

    let evals = out.join("eval");
    fs::create_dir_all(&evals).with_context(|| format!("create {}", evals.display()))?;
    let mut metrics = MetricsReport::new();
    metrics.push("curation/retention", curation.retention);
    metrics.push("pretrain/final_loss", outcome.final_loss);
    metrics.push("probe/random_eval_accuracy", boot.eval_accuracy);
    metrics.push("probe/eval_accuracy", probe.eval_accuracy);
    metrics.push(
        "probe/gain_points",
        100.0 * (probe.eval_accuracy - boot.eval_accuracy),
    );

    stage("eval: segmentation");
    let s = &cfg.eval.seg;
    let seg = evaluate_segmentation(
        &model,
        &params,
        &eval_dir,
        &eval_man,
        s.tap,
        &s.propagation,
        s.boundary_tolerance,
        s.max_clips,
    )?;
    write_json(&evals.join("seg.json"), &seg)?;
    metrics.push("seg/j_mean", seg.j_mean);
    metrics.push("seg/f_mean", seg.f_mean);

    stage("eval: saliency");
    let saliency = evaluate_saliency(&model, &params, &eval_dir, &eval_man, cfg.eval.saliency.max_clips)?;
    write_json(&evals.join("saliency.json"), &saliency)?;
    metrics.push("saliency/primary_wins", saliency.primary_wins);
    metrics.push("saliency/mean_alignment", saliency.mean_alignment);

    stage("eval: consistency");
    let stimuli = shape_bias_stimuli(
        &clean,
        cfg.eval.consistency.n_per_condition,
        model.input_size,
        cfg.stage_seed(stream::STIMULI),
    )?;
    let consistency = evaluate_consistency(&model, &params, &classifier.head, &stimuli)?;
    write_json(&evals.join("consistency.json"), &consistency)?;
    metrics.push(
        "consistency/accuracy_difference",
        consistency.accuracy_difference,
    );
    if let Some(kappa) = consistency.pooled.kappa {
        metrics.push("consistency/kappa", kappa);
    }

    stage("eval: robustness");
    let robust = robustness_curve(
        &model,
        &params,
        &classifier.head,
        &eval_dir,
        &eval_man,
        cfg.eval.robust.frames_per_clip,
        cfg.eval.robust.max_clips,
        cfg.stage_seed(stream::ROBUST),
    )?;
    write_json(&evals.join("robust.json"), &robust)?;
    metrics.push("robust/clean_accuracy", robust.clean_accuracy);
    for (severity, delta) in robust.delta.iter().enumerate().skip(1) {
        metrics.push(format!("robust/delta_s{severity}"), *delta);
    }

    stage("eval: clip pooling");
    let mut clip_reports = Vec::new();
    for mode in PoolMode::ALL {
        let report = evaluate_clip_classification(
            &model,
            &params,
            &probe_dir,
            &probe_man,
            &eval_dir,
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
        clip_reports.push(report);
    }
    write_json(&evals.join("clip.json"), &clip_reports)?;

    metrics.save_jsonl(&out.join("metrics.jsonl"))?;
    metrics.save_csv(&out.join("metrics.csv"))?;
    eprintln!(
        "[pipeline] done in {:.1}s -> {}",
        t0.elapsed().as_secs_f64(),
        out.display()
    );
    println!(
        "probe gain {:+.1} points (pretrained {:.4} vs random {:.4})",
        100.0 * (probe.eval_accuracy - boot.eval_accuracy),
        probe.eval_accuracy,
        boot.eval_accuracy
    );
    Ok(())
}
