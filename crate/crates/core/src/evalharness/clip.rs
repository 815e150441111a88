//! Clip-level representations by temporal pooling of per-frame features:
//! plain averaging of the final scale, a multi-scale variant that splits
//! the penultimate scale into two sub-clips, and an attentive variant that
//! replaces each average with tanh-gated pooling over time.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::{accuracy, train_probe, ProbeConfig};
use super::{encode_frames, frame_input, pick_frames, spatial_mean, stack_inputs, EvalError, Result};
use crate::datagen::CorpusManifest;
use crate::hash::derive_seed;
use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Mean of the final-scale frame features.
    Avg,
    /// Two sub-clip means of the penultimate scale concatenated with the
    /// final-scale mean; dimension 2 * c_mid + c_final.
    MsAvg,
    /// Same block structure as `MsAvg` with each mean replaced by
    /// tanh(w . z_t)-weighted pooling over time.
    MsAttn,
}

impl PoolMode {
    pub const ALL: [PoolMode; 3] = [PoolMode::Avg, PoolMode::MsAvg, PoolMode::MsAttn];

    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Avg => "avg",
            PoolMode::MsAvg => "ms_avg",
            PoolMode::MsAttn => "ms_attn",
        }
    }
}

impl FromStr for PoolMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::BadInput {
                detail: format!("unknown pool mode {s:?}, expected avg | ms_avg | ms_attn"),
            })
    }
}

/// Per-scale channel weightings for attentive temporal pooling. The same
/// mid-scale vector serves both sub-clips. Weights are not trained here;
/// seeded unit-norm vectors stand in for the learned map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttention {
    pub w_mid: Vec<f64>,
    pub w_final: Vec<f64>,
    /// Normalize the tanh gates with a softmax over time before pooling.
    /// The literal formula does not; this variant is off by default.
    pub softmax_over_time: bool,
}

impl TemporalAttention {
    pub fn seeded(c_mid: usize, c_final: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in &mut v {
                    *x /= norm;
                }
            }
            v
        };
        Self {
            w_mid: draw(c_mid),
            w_final: draw(c_final),
            softmax_over_time: false,
        }
    }
}

/// A pooled clip vector plus the temporal weights each attentive block
/// used, in block order (first sub-clip, second sub-clip, final scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRepresentation {
    pub vector: Vec<f64>,
    pub mode: PoolMode,
    pub temporal_weights: Vec<(String, Vec<f64>)>,
}

fn mean_block(block: &[Vec<f64>]) -> Vec<f64> {
    let dim = block[0].len();
    let mut out = vec![0.0; dim];
    for z in block {
        for (o, v) in out.iter_mut().zip(z) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= block.len() as f64;
    }
    out
}

fn attn_block(block: &[Vec<f64>], w: &[f64], softmax: bool) -> (Vec<f64>, Vec<f64>) {
    let mut gates: Vec<f64> = block
        .iter()
        .map(|z| z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().tanh())
        .collect();
    if softmax {
        let max = gates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for g in &mut gates {
            *g = (*g - max).exp();
            sum += *g;
        }
        for g in &mut gates {
            *g /= sum;
        }
    }
    let dim = block[0].len();
    let mut out = vec![0.0; dim];
    for (z, &g) in block.iter().zip(&gates) {
        for (o, v) in out.iter_mut().zip(z) {
            *o += g * v;
        }
    }
    (out, gates)
}

fn check_block(name: &str, block: &[Vec<f64>]) -> Result<usize> {
    let dim = block
        .first()
        .ok_or_else(|| EvalError::BadInput {
            detail: format!("{name} features are empty"),
        })?
        .len();
    if dim == 0 || block.iter().any(|z| z.len() != dim) {
        return Err(EvalError::BadInput {
            detail: format!("{name} features must share one positive dimension"),
        });
    }
    Ok(dim)
}

/// Pool per-frame features into one clip vector. `mid` and `fin` are the
/// penultimate- and final-scale features in temporal order, one vector per
/// frame. `mid` is ignored in `Avg` mode; `attn` is required for `MsAttn`.
pub fn temporal_pool(
    mid: &[Vec<f64>],
    fin: &[Vec<f64>],
    mode: PoolMode,
    attn: Option<&TemporalAttention>,
) -> Result<ClipRepresentation> {
    let c_final = check_block("final-scale", fin)?;
    if mode == PoolMode::Avg {
        return Ok(ClipRepresentation {
            vector: mean_block(fin),
            mode,
            temporal_weights: Vec::new(),
        });
    }
    let c_mid = check_block("penultimate-scale", mid)?;
    if mid.len() != fin.len() {
        return Err(EvalError::BadInput {
            detail: format!("{} mid frames vs {} final frames", mid.len(), fin.len()),
        });
    }
    if mid.len() < 2 {
        return Err(EvalError::BadInput {
            detail: "sub-clip pooling needs at least two frames".into(),
        });
    }
    let split = mid.len() / 2;
    let blocks = [&mid[..split], &mid[split..], fin];
    match mode {
        PoolMode::Avg => unreachable!(),
        PoolMode::MsAvg => {
            let mut vector = Vec::with_capacity(2 * c_mid + c_final);
            for b in blocks {
                vector.extend(mean_block(b));
            }
            Ok(ClipRepresentation {
                vector,
                mode,
                temporal_weights: Vec::new(),
            })
        }
        PoolMode::MsAttn => {
            let attn = attn.ok_or_else(|| EvalError::BadInput {
                detail: "ms_attn needs temporal attention weights".into(),
            })?;
            if attn.w_mid.len() != c_mid || attn.w_final.len() != c_final {
                return Err(EvalError::BadInput {
                    detail: format!(
                        "attention dims ({}, {}) do not match features ({c_mid}, {c_final})",
                        attn.w_mid.len(),
                        attn.w_final.len()
                    ),
                });
            }
            let mut vector = Vec::with_capacity(2 * c_mid + c_final);
            let mut temporal_weights = Vec::with_capacity(3);
            for (name, block, w) in [
                ("mid_subclip_a", blocks[0], &attn.w_mid),
                ("mid_subclip_b", blocks[1], &attn.w_mid),
                ("final", blocks[2], &attn.w_final),
            ] {
                let (v, gates) = attn_block(block, w, attn.softmax_over_time);
                vector.extend(v);
                temporal_weights.push((name.to_string(), gates));
            }
            Ok(ClipRepresentation {
                vector,
                mode,
                temporal_weights,
            })
        }
    }
}

/// Pooled clip vectors and labels for a whole corpus.
#[derive(Clone, Debug)]
pub struct ClipDataset {
    /// [N, D]
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

fn scale_taps(cfg: &ModelConfig) -> Result<(usize, usize)> {
    let n = cfg.stage_widths.len();
    if n < 2 {
        return Err(EvalError::BadInput {
            detail: "multi-scale pooling needs at least two encoder stages".into(),
        });
    }
    Ok((n - 2, n - 1))
}

/// Encode sampled frames of every clip and pool them per `mode`. Frames
/// are sampled deterministically per clip and kept in temporal order, so
/// the sub-clip split respects time.
#[allow(clippy::too_many_arguments)]
pub fn clip_vectors(
    cfg: &ModelConfig,
    params: &Params<f32>,
    corpus_dir: &Path,
    manifest: &CorpusManifest,
    mode: PoolMode,
    attn: Option<&TemporalAttention>,
    frames_per_clip: usize,
    seed: u64,
) -> Result<ClipDataset> {
    if manifest.entries.is_empty() || frames_per_clip == 0 {
        return Err(EvalError::DegenerateData {
            detail: "no clips to pool".into(),
        });
    }
    let final_tap = cfg.stage_widths.len() - 1;
    let mid_tap = if mode == PoolMode::Avg {
        final_tap
    } else {
        scale_taps(cfg)?.0
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut dim = 0;
    for index in 0..manifest.entries.len() {
        let clip = manifest.load_clip_frames(corpus_dir, index)?;
        let picks = pick_frames(clip.n_frames(), frames_per_clip, derive_seed(seed, index as u64));
        let inputs: Vec<Tensor<f32>> = picks
            .iter()
            .map(|&t| frame_input(&clip, t, cfg.input_size))
            .collect();
        let mut mid = Vec::with_capacity(inputs.len());
        let mut fin = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(16) {
            let maps = encode_frames(cfg, params, &stack_inputs(chunk)?)?;
            for sample in 0..chunk.len() {
                if mode != PoolMode::Avg {
                    mid.push(spatial_mean(&maps[mid_tap], sample));
                }
                fin.push(spatial_mean(&maps[final_tap], sample));
            }
        }
        let rep = temporal_pool(&mid, &fin, mode, attn)?;
        dim = rep.vector.len();
        rows.extend(rep.vector);
        labels.push(clip.label);
    }
    let features = Tensor::new(&[labels.len(), dim], rows)?;
    Ok(ClipDataset {
        features,
        labels,
        n_classes: manifest.categories.len(),
    })
}

/// Clip-classification accuracy for one pooling mode: pool training and
/// evaluation corpora into clip vectors, fit a linear head on the training
/// vectors, and score the evaluation vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEvalReport {
    pub mode: String,
    pub dim: usize,
    pub best_lr: f64,
    pub val_accuracy: f64,
    pub eval_accuracy: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_clip_classification(
    cfg: &ModelConfig,
    params: &Params<f32>,
    train_dir: &Path,
    train_manifest: &CorpusManifest,
    eval_dir: &Path,
    eval_manifest: &CorpusManifest,
    mode: PoolMode,
    frames_per_clip: usize,
    probe_cfg: &ProbeConfig,
    seed: u64,
) -> Result<ClipEvalReport> {
    let attn = if mode == PoolMode::MsAttn {
        let (mid_tap, final_tap) = scale_taps(cfg)?;
        Some(TemporalAttention::seeded(
            cfg.stage_widths[mid_tap],
            cfg.stage_widths[final_tap],
            derive_seed(seed, 0xA77),
        ))
    } else {
        None
    };
    let train = clip_vectors(
        cfg,
        params,
        train_dir,
        train_manifest,
        mode,
        attn.as_ref(),
        frames_per_clip,
        derive_seed(seed, 1),
    )?;
    let eval = clip_vectors(
        cfg,
        params,
        eval_dir,
        eval_manifest,
        mode,
        attn.as_ref(),
        frames_per_clip,
        derive_seed(seed, 2),
    )?;
    let outcome = train_probe(&train.features, &train.labels, train.n_classes, probe_cfg)?;
    let eval_accuracy = accuracy(&outcome.head, &eval.features, &eval.labels);
    Ok(ClipEvalReport {
        mode: mode.name().to_string(),
        dim: train.features.shape()[1],
        best_lr: outcome.best_lr,
        val_accuracy: outcome.val_accuracy,
        eval_accuracy,
        n_train: train.labels.len(),
        n_eval: eval.labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::datagen::{gen_corpus, GenConfig};
    use tempfile::TempDir;

    fn frames(rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn mode_names_roundtrip_and_unknowns_are_rejected() {
        for mode in PoolMode::ALL {
            assert_eq!(PoolMode::from_str(mode.name()).unwrap(), mode);
        }
        assert!(PoolMode::from_str("max").is_err());
    }

    #[test]
    fn averaging_identical_frames_returns_that_vector() {
        let z = [1.5, -2.0, 0.25];
        let fin = frames(&[&z, &z, &z]);
        let rep = temporal_pool(&[], &fin, PoolMode::Avg, None).unwrap();
        for (a, b) in rep.vector.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rep.temporal_weights.is_empty());
    }

    #[test]
    fn subclip_split_concatenates_three_blocks() {
        let m = [2.0, 4.0];
        let f = [1.0, 3.0, 5.0];
        let mid = frames(&[&m, &m, &m, &m]);
        let fin = frames(&[&f, &f, &f, &f]);
        let rep = temporal_pool(&mid, &fin, PoolMode::MsAvg, None).unwrap();
        assert_eq!(rep.vector.len(), 2 * 2 + 3);
        assert_eq!(&rep.vector[..2], &rep.vector[2..4]);
        for (a, b) in rep.vector[4..].iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_attention_map_pools_to_the_zero_vector() {
        let mid = frames(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let fin = frames(&[&[5.0], &[6.0]]);
        let attn = TemporalAttention {
            w_mid: vec![0.0, 0.0],
            w_final: vec![0.0],
            softmax_over_time: false,
        };
        let rep = temporal_pool(&mid, &fin, PoolMode::MsAttn, Some(&attn)).unwrap();
        assert!(rep.vector.iter().all(|&v| v == 0.0));
        assert_eq!(rep.temporal_weights.len(), 3);
        assert!(rep.temporal_weights.iter().all(|(_, g)| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn attentive_pooling_matches_a_hand_computation() {
        let mid = frames(&[&[1.0], &[3.0]]);
        let fin = frames(&[&[2.0], &[4.0]]);
        let attn = TemporalAttention {
            w_mid: vec![0.5],
            w_final: vec![1.0],
            softmax_over_time: false,
        };
        let rep = temporal_pool(&mid, &fin, PoolMode::MsAttn, Some(&attn)).unwrap();
        let expect = [
            (0.5f64).tanh() * 1.0,
            (1.5f64).tanh() * 3.0,
            (2.0f64).tanh() * 2.0 + (4.0f64).tanh() * 4.0,
        ];
        for (a, b) in rep.vector.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(rep.temporal_weights[0].1, vec![(0.5f64).tanh()]);
    }

    #[test]
    fn softmax_variant_with_flat_gates_reduces_to_averaging() {
        let mid = frames(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let fin = frames(&[&[5.0], &[7.0]]);
        let attn = TemporalAttention {
            w_mid: vec![0.0, 0.0],
            w_final: vec![0.0],
            softmax_over_time: true,
        };
        let rep = temporal_pool(&mid, &fin, PoolMode::MsAttn, Some(&attn)).unwrap();
        assert!((rep.vector[4] - 6.0).abs() < 1e-12);
        for (_, gates) in &rep.temporal_weights {
            assert!((gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_pooling_inputs_are_rejected() {
        let two = frames(&[&[1.0], &[2.0]]);
        let one = frames(&[&[1.0]]);
        assert!(temporal_pool(&[], &[], PoolMode::Avg, None).is_err());
        assert!(temporal_pool(&one, &one, PoolMode::MsAvg, None).is_err());
        assert!(temporal_pool(&one, &two, PoolMode::MsAvg, None).is_err());
        assert!(temporal_pool(&two, &two, PoolMode::MsAttn, None).is_err());
        let bad_dims = TemporalAttention {
            w_mid: vec![0.0, 0.0],
            w_final: vec![0.0],
            softmax_over_time: false,
        };
        assert!(temporal_pool(&two, &two, PoolMode::MsAttn, Some(&bad_dims)).is_err());
        let ragged = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(temporal_pool(&ragged, &two, PoolMode::MsAvg, None).is_err());
    }

    #[test]
    fn corpus_pooling_dimensions_follow_the_mode() {
        let dir = TempDir::new().unwrap();
        let gen = GenConfig {
            size: 16,
            duration_s: 1.0,
            ..GenConfig::default()
        };
        let manifest = gen_corpus(&gen, 4, dir.path(), 21).unwrap();
        let cfg = tiny_config();
        let state = tiny_state(9);
        let attn = TemporalAttention::seeded(4, 8, 77);
        for (mode, attn, dim) in [
            (PoolMode::Avg, None, 8),
            (PoolMode::MsAvg, None, 16),
            (PoolMode::MsAttn, Some(&attn), 16),
        ] {
            let ds = clip_vectors(&cfg, &state.online, dir.path(), &manifest, mode, attn, 4, 3)
                .unwrap();
            assert_eq!(ds.features.shape(), &[4, dim], "{}", mode.name());
            assert!(ds.features.is_finite());
            let again = clip_vectors(&cfg, &state.online, dir.path(), &manifest, mode, attn, 4, 3)
                .unwrap();
            assert_eq!(ds.features.data(), again.features.data());
        }
    }

    #[test]
    fn seeded_attention_is_unit_norm_and_stable() {
        let a = TemporalAttention::seeded(6, 3, 5);
        let b = TemporalAttention::seeded(6, 3, 5);
        assert_eq!(a, b);
        assert!(!a.softmax_over_time);
        for w in [&a.w_mid, &a.w_final] {
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
