//! Semi-supervised label propagation over per-frame feature maps and the
//! region/boundary metrics that score it. Given the first frame's mask,
//! every later location copies its label from the most similar features in
//! the previous frame, within a spatial radius.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{encode_frames, frame_input, stack_inputs, EvalError, Result};
use crate::datagen::{CorpusManifest, VideoClip};
use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;

/// Integer id grid, the working form for segmentation masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u32>,
}

impl LabelGrid {
    pub fn new(h: usize, w: usize, ids: Vec<u32>) -> Self {
        debug_assert_eq!(ids.len(), h * w);
        Self { h, w, ids }
    }

    pub fn from_mask_frame(clip: &VideoClip, t: usize) -> Self {
        let ids = clip.mask(t).iter().map(|&v| v.round() as u32).collect();
        Self::new(clip.height(), clip.width(), ids)
    }

    /// Nearest-neighbor downsample, reading each output cell at the center
    /// of its source block.
    pub fn downsample(&self, oh: usize, ow: usize) -> Self {
        let ids = (0..oh * ow)
            .map(|i| {
                let (y, x) = (i / ow, i % ow);
                let sy = ((y as f64 + 0.5) * self.h as f64 / oh as f64) as usize;
                let sx = ((x as f64 + 0.5) * self.w as f64 / ow as f64) as usize;
                self.ids[sy.min(self.h - 1) * self.w + sx.min(self.w - 1)]
            })
            .collect();
        Self::new(oh, ow, ids)
    }

    /// Nearest-neighbor upsample back to scoring resolution.
    pub fn upsample(&self, oh: usize, ow: usize) -> Self {
        self.downsample(oh, ow)
    }

    /// Distinct ids, sorted.
    pub fn present_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.ids.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn is_foreground_empty(&self) -> bool {
        self.ids.iter().all(|&id| id == 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationParams {
    /// Candidates kept per location, most similar first.
    pub top_k: usize,
    /// Chebyshev search radius in feature cells; absent means half the
    /// map width.
    pub radius: Option<usize>,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            top_k: 5,
            radius: None,
        }
    }
}

impl PropagationParams {
    fn effective_radius(&self, w: usize) -> usize {
        self.radius.unwrap_or_else(|| w.div_ceil(2))
    }
}

fn normalized_rows(map: &Tensor<f32>) -> Vec<f64> {
    let shape = map.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let data = map.data();
    let mut rows = vec![0f64; hw * c];
    for p in 0..hw {
        let mut norm = 0f64;
        for ch in 0..c {
            let v = data[ch * hw + p] as f64;
            rows[p * c + ch] = v;
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm > 0.0 {
            for v in &mut rows[p * c..(p + 1) * c] {
                *v /= norm;
            }
        }
    }
    rows
}

/// Propagate the first frame's labels through time. For each location the
/// previous frame's cells within the radius are ranked by cosine
/// similarity (ties to the lower cell index) and the top-k kept. The
/// nearest match's label is copied; when several of the kept candidates
/// tie at the maximum similarity they vote by count, the lowest label
/// winning further ties. A location whose best similarity is not positive
/// falls back to background.
pub fn propagate_labels(
    features: &[Tensor<f32>],
    first: &LabelGrid,
    params: &PropagationParams,
) -> Result<Vec<LabelGrid>> {
    let head = features.first().ok_or_else(|| EvalError::BadInput {
        detail: "no feature frames".into(),
    })?;
    if head.rank() != 3 {
        return Err(EvalError::BadInput {
            detail: format!("feature frame {:?} is not [C, h, w]", head.shape()),
        });
    }
    let (h, w) = (head.shape()[1], head.shape()[2]);
    for f in features {
        if f.shape() != head.shape() {
            return Err(EvalError::BadInput {
                detail: format!("feature shapes differ: {:?} vs {:?}", f.shape(), head.shape()),
            });
        }
    }
    if first.h != h || first.w != w {
        return Err(EvalError::BadInput {
            detail: format!(
                "first-frame mask {}x{} does not match features {h}x{w}",
                first.h, first.w
            ),
        });
    }
    if params.top_k == 0 {
        return Err(EvalError::BadInput {
            detail: "top_k must be positive".into(),
        });
    }
    if first.is_foreground_empty() {
        return Err(EvalError::BadInput {
            detail: "first-frame mask has no foreground".into(),
        });
    }

    let c = head.shape()[0];
    let radius = params.effective_radius(w) as isize;
    let mut out = Vec::with_capacity(features.len());
    out.push(first.clone());
    let mut prev_rows = normalized_rows(&features[0]);

    for frame in &features[1..] {
        let rows = normalized_rows(frame);
        let prev: &LabelGrid = out.last().expect("seeded with the first frame");
        let mut ids = vec![0u32; h * w];
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(params.top_k);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = (y as usize) * w + x as usize;
                top.clear();
                for qy in (y - radius).max(0)..=(y + radius).min(h as isize - 1) {
                    for qx in (x - radius).max(0)..=(x + radius).min(w as isize - 1) {
                        let q = (qy as usize) * w + qx as usize;
                        let sim: f64 = rows[p * c..(p + 1) * c]
                            .iter()
                            .zip(&prev_rows[q * c..(q + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum();
                        let pos = top
                            .iter()
                            .position(|&(s, i)| sim > s || (sim == s && q < i))
                            .unwrap_or(top.len());
                        if pos < params.top_k {
                            if top.len() == params.top_k {
                                top.pop();
                            }
                            top.insert(pos, (sim, q));
                        }
                    }
                }
                let best_sim = top.first().map_or(0.0, |&(s, _)| s);
                ids[p] = if best_sim > 0.0 {
                    let mut votes: Vec<(u32, usize)> = Vec::new();
                    for &(sim, q) in top.iter().take_while(|&&(s, _)| s == best_sim) {
                        debug_assert_eq!(sim, best_sim);
                        let label = prev.ids[q];
                        match votes.iter_mut().find(|(l, _)| *l == label) {
                            Some((_, n)) => *n += 1,
                            None => votes.push((label, 1)),
                        }
                    }
                    votes
                        .iter()
                        .fold((u32::MAX, 0usize), |(bl, bn), &(l, n)| {
                            if n > bn || (n == bn && l < bl) {
                                (l, n)
                            } else {
                                (bl, bn)
                            }
                        })
                        .0
                } else {
                    0
                };
            }
        }
        out.push(LabelGrid::new(h, w, ids));
        prev_rows = rows;
    }
    Ok(out)
}

/// One-hot feature stack for an id sequence: channel k lights up exactly
/// where the grid reads k. The construction oracle for propagation.
pub fn onehot_features(grids: &[LabelGrid]) -> Vec<Tensor<f32>> {
    let n_ids = grids
        .iter()
        .flat_map(|g| g.ids.iter().copied())
        .max()
        .map_or(1, |m| m as usize + 1);
    grids
        .iter()
        .map(|g| {
            let hw = g.h * g.w;
            let mut data = vec![0f32; n_ids * hw];
            for (p, &id) in g.ids.iter().enumerate() {
                data[id as usize * hw + p] = 1.0;
            }
            Tensor::new(&[n_ids, g.h, g.w], data).expect("consistent dims")
        })
        .collect()
}

fn iou(pred: &LabelGrid, gt: &LabelGrid, id: u32) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        let (p, g) = (p == id, g == id);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn boundary_pixels(grid: &LabelGrid, id: u32) -> Vec<(usize, usize)> {
    let (h, w) = (grid.h, grid.w);
    let at = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            false
        } else {
            grid.ids[y as usize * w + x as usize] == id
        }
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if grid.ids[y * w + x] != id {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !at(yi - 1, xi) || !at(yi + 1, xi) || !at(yi, xi - 1) || !at(yi, xi + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

fn boundary_f(pred: &LabelGrid, gt: &LabelGrid, id: u32, tol: usize) -> f64 {
    let bp = boundary_pixels(pred, id);
    let bg = boundary_pixels(gt, id);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let near = |p: (usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|&(y, x)| {
            p.0.abs_diff(y) <= tol && p.1.abs_diff(x) <= tol
        })
    };
    let precision = bp.iter().filter(|&&p| near(p, &bg)).count() as f64 / bp.len() as f64;
    let recall = bg.iter().filter(|&&g| near(g, &bp)).count() as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JfSummary {
    pub j_mean: f64,
    pub f_mean: f64,
    /// (id, J, F) per scored object.
    pub per_id: Vec<(u32, f64, f64)>,
}

/// Region similarity J (frame-averaged IoU) and boundary quality F
/// (boundary F-measure with pixel matches within a Chebyshev tolerance),
/// averaged over the given object ids.
pub fn jf_metrics(
    pred: &[LabelGrid],
    gt: &[LabelGrid],
    ids: &[u32],
    boundary_tolerance: usize,
) -> Result<JfSummary> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(EvalError::BadInput {
            detail: format!("{} predicted frames vs {} ground truth", pred.len(), gt.len()),
        });
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.h != g.h || p.w != g.w {
            return Err(EvalError::BadInput {
                detail: format!("mask {}x{} vs {}x{}", p.h, p.w, g.h, g.w),
            });
        }
    }
    if ids.is_empty() {
        return Err(EvalError::BadInput {
            detail: "no object ids to score".into(),
        });
    }
    let mut per_id = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut j = 0.0;
        let mut f = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            j += iou(p, g, id);
            f += boundary_f(p, g, id, boundary_tolerance);
        }
        per_id.push((id, j / pred.len() as f64, f / pred.len() as f64));
    }
    let n = per_id.len() as f64;
    Ok(JfSummary {
        j_mean: per_id.iter().map(|x| x.1).sum::<f64>() / n,
        f_mean: per_id.iter().map(|x| x.2).sum::<f64>() / n,
        per_id,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegReport {
    pub j_mean: f64,
    pub f_mean: f64,
    pub scored_clips: usize,
    pub skipped_clips: usize,
    /// (clip index, J, F)
    pub per_clip: Vec<(usize, f64, f64)>,
}

/// Full segmentation protocol over a corpus: encode frames, propagate the
/// downsampled first-frame mask over features from the chosen scale tap,
/// upsample predictions, and score J and F against the pixel-level ground
/// truth on every frame after the given one. Clips whose first frame has
/// no foreground at feature resolution are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_segmentation(
    cfg: &ModelConfig,
    params: &Params<f32>,
    corpus_dir: &Path,
    manifest: &CorpusManifest,
    tap: usize,
    prop: &PropagationParams,
    boundary_tolerance: usize,
    max_clips: Option<usize>,
) -> Result<SegReport> {
    let shapes = cfg.tap_shapes()?;
    if tap >= shapes.len() {
        return Err(EvalError::BadInput {
            detail: format!("scale tap {tap} outside {} taps", shapes.len()),
        });
    }
    let (_, fh, fw) = shapes[tap];
    let n = manifest
        .entries
        .len()
        .min(max_clips.unwrap_or(usize::MAX));
    let mut per_clip = Vec::new();
    let mut skipped = 0usize;
    for index in 0..n {
        let clip = manifest.load_clip(corpus_dir, index)?;
        let t_frames = clip.n_frames();
        if t_frames < 2 {
            skipped += 1;
            continue;
        }
        let gt: Vec<LabelGrid> = (0..t_frames).map(|t| LabelGrid::from_mask_frame(&clip, t)).collect();
        let first = gt[0].downsample(fh, fw);
        if first.is_foreground_empty() {
            skipped += 1;
            continue;
        }
        let inputs: Vec<Tensor<f32>> = (0..t_frames)
            .map(|t| frame_input(&clip, t, cfg.input_size))
            .collect();
        let mut features = Vec::with_capacity(t_frames);
        for chunk in inputs.chunks(16) {
            let maps = encode_frames(cfg, params, &stack_inputs(chunk)?)?;
            let map = &maps[tap];
            let (c, hw) = (map.shape()[1], map.shape()[2] * map.shape()[3]);
            for s in 0..chunk.len() {
                let data = map.data()[s * c * hw..(s + 1) * c * hw].to_vec();
                features.push(Tensor::new(&[c, fh, fw], data)?);
            }
        }
        let pred = propagate_labels(&features, &first, prop)?;
        let pred_full: Vec<LabelGrid> = pred
            .iter()
            .skip(1)
            .map(|g| g.upsample(clip.height(), clip.width()))
            .collect();
        let ids: Vec<u32> = first.present_ids().into_iter().filter(|&id| id != 0).collect();
        let summary = jf_metrics(&pred_full, &gt[1..], &ids, boundary_tolerance)?;
        per_clip.push((index, summary.j_mean, summary.f_mean));
    }
    if per_clip.is_empty() {
        return Err(EvalError::DegenerateData {
            detail: "no scorable clips".into(),
        });
    }
    let n = per_clip.len() as f64;
    Ok(SegReport {
        j_mean: per_clip.iter().map(|x| x.1).sum::<f64>() / n,
        f_mean: per_clip.iter().map(|x| x.2).sum::<f64>() / n,
        scored_clips: per_clip.len(),
        skipped_clips: skipped,
        per_clip,
    })
}
