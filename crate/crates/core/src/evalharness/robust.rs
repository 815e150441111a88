//! Corruption robustness: classify held-out frames clean and under every
//! corruption kind at severities 1..=5, then report the accuracy drop per
//! severity averaged over kinds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::ProbeHead;
use super::{embed_inputs, pick_frames, EvalError, Result};
use crate::augment::{resize_bicubic, Image};
use crate::datagen::{corrupt, CorpusManifest, CorruptionKind};
use crate::hash::derive_seed;
use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;

pub const N_SEVERITIES: usize = 5;

/// Accuracy as a function of corruption severity. Index 0 is the clean
/// condition in both `corrupted_accuracy` and `delta`, so `delta[0]` is 0
/// by construction and `delta[s]` is the drop at severity `s` averaged
/// over corruption kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    /// Frames scored per condition.
    pub n: usize,
    pub clean_accuracy: f64,
    /// One entry per severity 0..=5; entry 0 repeats the clean accuracy.
    pub corrupted_accuracy: Vec<f64>,
    /// delta[s] = clean_accuracy - corrupted_accuracy[s].
    pub delta: Vec<f64>,
    /// Per corruption kind, accuracy at severities 1..=5.
    pub per_kind: Vec<(String, Vec<f64>)>,
}

fn mean_correct(correct: &[bool]) -> f64 {
    correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}

/// Fold per-trial correctness into a curve. `per_kind_correct` holds, for
/// each kind, one correctness vector per severity, all aligned with
/// `clean_correct`.
pub fn build_curve(
    clean_correct: &[bool],
    per_kind_correct: &[(String, Vec<Vec<bool>>)],
) -> Result<RobustnessCurve> {
    let n = clean_correct.len();
    if n == 0 || per_kind_correct.is_empty() {
        return Err(EvalError::BadInput {
            detail: "robustness curve needs trials and at least one corruption kind".into(),
        });
    }
    for (kind, rows) in per_kind_correct {
        if rows.len() != N_SEVERITIES || rows.iter().any(|r| r.len() != n) {
            return Err(EvalError::BadInput {
                detail: format!("{kind}: expected {N_SEVERITIES} severities of {n} trials"),
            });
        }
    }
    let clean_accuracy = mean_correct(clean_correct);
    let per_kind: Vec<(String, Vec<f64>)> = per_kind_correct
        .iter()
        .map(|(kind, rows)| (kind.clone(), rows.iter().map(|r| mean_correct(r)).collect()))
        .collect();
    let mut corrupted_accuracy = vec![clean_accuracy];
    let mut delta = vec![0.0];
    for s in 0..N_SEVERITIES {
        let acc = per_kind.iter().map(|(_, rows)| rows[s]).sum::<f64>() / per_kind.len() as f64;
        corrupted_accuracy.push(acc);
        delta.push(clean_accuracy - acc);
    }
    Ok(RobustnessCurve {
        n,
        clean_accuracy,
        corrupted_accuracy,
        delta,
        per_kind,
    })
}

/// One native-resolution frame as an encoder input, optionally resized.
fn native_to_input(frame: &Tensor<f32>, input_size: usize) -> Tensor<f32> {
    let shape = frame.shape();
    let img = Image::new(shape[0], shape[1], frame.data().to_vec());
    let img = if img.h == input_size && img.w == input_size {
        img
    } else {
        resize_bicubic(&img, input_size, input_size)
    };
    img.to_chw_tensor()
}

fn predictions(
    cfg: &ModelConfig,
    params: &Params<f32>,
    head: &ProbeHead,
    inputs: &[Tensor<f32>],
) -> Result<Vec<usize>> {
    let emb = embed_inputs(cfg, params, inputs, 32)?;
    let dim = emb.shape()[1];
    Ok((0..inputs.len())
        .map(|i| head.predict(&emb.data()[i * dim..(i + 1) * dim]))
        .collect())
}

/// Classify frames from `manifest` clean and under every corruption, using
/// a frozen encoder plus probe head. Corruptions are applied at the clips'
/// native resolution before any resize to the encoder input, so the clean
/// and corrupted paths differ only by the corruption itself.
#[allow(clippy::too_many_arguments)]
pub fn robustness_curve(
    cfg: &ModelConfig,
    params: &Params<f32>,
    head: &ProbeHead,
    corpus_dir: &Path,
    manifest: &CorpusManifest,
    frames_per_clip: usize,
    max_clips: Option<usize>,
    seed: u64,
) -> Result<RobustnessCurve> {
    let n_clips = max_clips
        .map(|m| m.min(manifest.entries.len()))
        .unwrap_or(manifest.entries.len());
    if n_clips == 0 || frames_per_clip == 0 {
        return Err(EvalError::DegenerateData {
            detail: "no frames to score".into(),
        });
    }
    let mut natives: Vec<Tensor<f32>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for index in 0..n_clips {
        let clip = manifest.load_clip_frames(corpus_dir, index)?;
        let (h, w) = (clip.height(), clip.width());
        for t in pick_frames(clip.n_frames(), frames_per_clip, derive_seed(seed, index as u64)) {
            natives.push(Tensor::new(&[h, w, 3], clip.frame(t).to_vec())?);
            labels.push(clip.label);
        }
    }

    let clean_inputs: Vec<Tensor<f32>> = natives
        .iter()
        .map(|f| native_to_input(f, cfg.input_size))
        .collect();
    let clean_pred = predictions(cfg, params, head, &clean_inputs)?;
    let clean_correct: Vec<bool> = clean_pred.iter().zip(&labels).map(|(p, l)| p == l).collect();

    let mut per_kind_correct = Vec::with_capacity(CorruptionKind::ALL.len());
    for kind in CorruptionKind::ALL {
        let mut rows = Vec::with_capacity(N_SEVERITIES);
        for severity in 1..=N_SEVERITIES as u8 {
            let inputs: Vec<Tensor<f32>> = natives
                .iter()
                .map(|f| Ok(native_to_input(&corrupt(f, kind, severity)?, cfg.input_size)))
                .collect::<Result<_>>()?;
            let pred = predictions(cfg, params, head, &inputs)?;
            rows.push(pred.iter().zip(&labels).map(|(p, l)| p == l).collect());
        }
        per_kind_correct.push((kind.name().to_string(), rows));
    }
    build_curve(&clean_correct, &per_kind_correct)
}
