//! Response-consistency metrics between a model and a reference responder:
//! accuracy difference, observed consistency, and chance-corrected error
//! consistency, plus the texture-suppressed stimulus sets they are
//! evaluated on (cue-conflict, low-pass, noise, edge renders).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::ProbeHead;
use super::{embed_inputs, EvalError, Result};
use crate::augment::{gaussian_blur, grey_value, resize_bicubic, Image};
use crate::datagen::{gen_clip, gen_clip_cue_conflict, GenConfig};
use crate::hash::derive_seed;
use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;

/// Binomial agreement statistics for one pool of trials. kappa is the
/// chance-corrected error consistency: how far observed agreement sits
/// above what two independent responders with these accuracies would
/// produce, scaled to 1 at perfect agreement. It is undefined when chance
/// agreement is already 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStats {
    pub n: usize,
    pub p_model: f64,
    pub p_reference: f64,
    pub c_obs: f64,
    pub c_exp: f64,
    pub kappa: Option<f64>,
}

pub fn consistency_stats(model_correct: &[bool], reference_correct: &[bool]) -> Result<ConsistencyStats> {
    if model_correct.len() != reference_correct.len() || model_correct.is_empty() {
        return Err(EvalError::BadInput {
            detail: format!(
                "{} model trials vs {} reference trials",
                model_correct.len(),
                reference_correct.len()
            ),
        });
    }
    let n = model_correct.len();
    let p1 = model_correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    let p2 = reference_correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    let agree = model_correct
        .iter()
        .zip(reference_correct)
        .filter(|(a, b)| a == b)
        .count();
    let c_obs = agree as f64 / n as f64;
    let c_exp = p1 * p2 + (1.0 - p1) * (1.0 - p2);
    let kappa = if c_exp >= 1.0 {
        None
    } else {
        Some((c_obs - c_exp) / (1.0 - c_exp))
    };
    Ok(ConsistencyStats {
        n,
        p_model: p1,
        p_reference: p2,
        c_obs,
        c_exp,
        kappa,
    })
}

/// Consistency over a full stimulus set: pooled statistics plus the
/// per-condition breakdown. The accuracy difference averages the absolute
/// model/reference accuracy gap over conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub accuracy_difference: f64,
    pub pooled: ConsistencyStats,
    pub per_condition: Vec<(String, ConsistencyStats)>,
}

pub fn consistency(
    model: &[usize],
    reference: &[usize],
    truth: &[usize],
    conditions: &[String],
) -> Result<ConsistencyReport> {
    let n = model.len();
    if n == 0 || reference.len() != n || truth.len() != n || conditions.len() != n {
        return Err(EvalError::BadInput {
            detail: format!(
                "misaligned sequences: {} model, {} reference, {} truth, {} conditions",
                n,
                reference.len(),
                truth.len(),
                conditions.len()
            ),
        });
    }
    let model_correct: Vec<bool> = model.iter().zip(truth).map(|(m, t)| m == t).collect();
    let reference_correct: Vec<bool> = reference.iter().zip(truth).map(|(r, t)| r == t).collect();
    let pooled = consistency_stats(&model_correct, &reference_correct)?;

    let mut names: Vec<String> = conditions.to_vec();
    names.sort();
    names.dedup();
    let mut per_condition = Vec::with_capacity(names.len());
    let mut gap = 0.0;
    for name in names {
        let idx: Vec<usize> = (0..n).filter(|&i| conditions[i] == name).collect();
        let mc: Vec<bool> = idx.iter().map(|&i| model_correct[i]).collect();
        let rc: Vec<bool> = idx.iter().map(|&i| reference_correct[i]).collect();
        let stats = consistency_stats(&mc, &rc)?;
        gap += (stats.p_model - stats.p_reference).abs();
        per_condition.push((name, stats));
    }
    Ok(ConsistencyReport {
        accuracy_difference: gap / per_condition.len() as f64,
        pooled,
        per_condition,
    })
}

/// The four texture-suppressing stimulus conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusCondition {
    /// Shape of one class, texture of another; the label is the shape.
    CueConflict,
    /// Gaussian low-pass filtered render.
    LowPass,
    /// Uniform pixel noise added to the render.
    Noise,
    /// Grey edge-magnitude render.
    Edge,
}

impl StimulusCondition {
    pub const ALL: [StimulusCondition; 4] = [
        StimulusCondition::CueConflict,
        StimulusCondition::LowPass,
        StimulusCondition::Noise,
        StimulusCondition::Edge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StimulusCondition::CueConflict => "cue_conflict",
            StimulusCondition::LowPass => "low_pass",
            StimulusCondition::Noise => "noise",
            StimulusCondition::Edge => "edge",
        }
    }
}

fn edge_render(img: &Image) -> Image {
    let (h, w) = (img.h, img.w);
    let grey: Vec<f32> = (0..h * w)
        .map(|p| grey_value(img.data[p * 3], img.data[p * 3 + 1], img.data[p * 3 + 2]))
        .collect();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        grey[y * w + x]
    };
    let mut out = vec![0f32; h * w * 3];
    let mut peak = 0f32;
    let mut mags = vec![0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let m = (gx * gx + gy * gy).sqrt();
            mags[(y as usize) * w + x as usize] = m;
            peak = peak.max(m);
        }
    }
    if peak > 0.0 {
        for (p, &m) in mags.iter().enumerate() {
            let v = m / peak;
            out[p * 3..p * 3 + 3].copy_from_slice(&[v, v, v]);
        }
    }
    Image::new(h, w, out)
}

fn add_uniform_noise(img: &Image, amplitude: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data
        .iter()
        .map(|&v| (v + rng.gen_range(-amplitude..=amplitude)).clamp(0.0, 1.0))
        .collect();
    Image::new(img.h, img.w, data)
}

/// One generated stimulus set: frames at encoder input size, the shape
/// class each frame should be read as, and the condition it belongs to.
#[derive(Clone, Debug)]
pub struct StimulusSet {
    pub frames: Vec<Tensor<f32>>,
    pub shape_labels: Vec<usize>,
    pub conditions: Vec<String>,
}

/// Render `n_per_condition` stimuli for each condition. Cue-conflict clips
/// force a mismatched texture family; the other conditions transform plain
/// renders. Labels are always the shape class the generator drew.
pub fn shape_bias_stimuli(
    gen: &GenConfig,
    n_per_condition: usize,
    input_size: usize,
    seed: u64,
) -> Result<StimulusSet> {
    if n_per_condition == 0 {
        return Err(EvalError::BadInput {
            detail: "n_per_condition must be positive".into(),
        });
    }
    let k = gen.n_categories;
    if k < 2 {
        return Err(EvalError::BadInput {
            detail: "cue conflict needs at least two categories".into(),
        });
    }
    let mut frames = Vec::new();
    let mut shape_labels = Vec::new();
    let mut conditions = Vec::new();
    for (ci, condition) in StimulusCondition::ALL.into_iter().enumerate() {
        for i in 0..n_per_condition {
            let stim_seed = derive_seed(seed, (ci * n_per_condition + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stim_seed);
            let clip = match condition {
                StimulusCondition::CueConflict => {
                    let shape = rng.gen_range(0..k);
                    let texture = (shape + rng.gen_range(1..k)) % k;
                    gen_clip_cue_conflict(gen, derive_seed(stim_seed, 1), shape, texture)?
                }
                _ => gen_clip(gen, derive_seed(stim_seed, 1))?,
            };
            let t = clip.n_frames() / 2;
            let img = Image::from_clip_frame(&clip, t);
            let img = match condition {
                StimulusCondition::CueConflict => img,
                StimulusCondition::LowPass => gaussian_blur(&img, 9, 2.0),
                StimulusCondition::Noise => add_uniform_noise(&img, 0.25, derive_seed(stim_seed, 2)),
                StimulusCondition::Edge => edge_render(&img),
            };
            let img = if img.h == input_size && img.w == input_size {
                img
            } else {
                resize_bicubic(&img, input_size, input_size)
            };
            frames.push(img.to_chw_tensor());
            shape_labels.push(clip.label);
            conditions.push(condition.name().to_string());
        }
    }
    Ok(StimulusSet {
        frames,
        shape_labels,
        conditions,
    })
}

/// Classify the stimulus set with a frozen encoder plus probe head and
/// compare against the shape-respecting reference, which answers the true
/// shape class on every trial.
pub fn evaluate_consistency(
    cfg: &ModelConfig,
    params: &Params<f32>,
    head: &ProbeHead,
    stimuli: &StimulusSet,
) -> Result<ConsistencyReport> {
    let emb = embed_inputs(cfg, params, &stimuli.frames, 32)?;
    let dim = emb.shape()[1];
    let model: Vec<usize> = (0..stimuli.frames.len())
        .map(|i| head.predict(&emb.data()[i * dim..(i + 1) * dim]))
        .collect();
    consistency(&model, &stimuli.shape_labels, &stimuli.shape_labels, &stimuli.conditions)
}
