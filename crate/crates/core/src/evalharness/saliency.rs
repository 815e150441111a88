//! Attention-mask saliency: per-scale masks upsampled to the frame,
//! mass-renormalized, and averaged, plus rank alignment against a
//! reference map and mass accounting against ground-truth sprite masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::seg::LabelGrid;
use super::{frame_input, EvalError, Result};
use crate::datagen::{CorpusManifest, MASK_PRIMARY};
use crate::model::{attend_pool, bind_params, encode, ModelConfig, Params};
use crate::tensor::{Tape, Tensor};

/// A nonnegative frame-shaped map summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// [H, W]
    pub map: Tensor<f32>,
    /// How many attention scales went into the average.
    pub scales: usize,
    /// Native (h, w) of each contributing mask.
    pub source_shapes: Vec<(usize, usize)>,
}

/// Bilinear upsample of a single-channel map, then rescale so the output
/// mass is exactly the input mass.
pub fn upsample_renormalized(src: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let shape = src.shape();
    if shape.len() != 2 {
        return Err(EvalError::BadInput {
            detail: format!("map {shape:?} is not [h, w]"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let data = src.data();
    let mass_in: f64 = data.iter().map(|&v| v as f64).sum();
    let mut out = vec![0f32; oh * ow];
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f64;
            let top = data[y0 * w + x0] as f64 * (1.0 - ax) + data[y0 * w + x1] as f64 * ax;
            let bot = data[y1 * w + x0] as f64 * (1.0 - ax) + data[y1 * w + x1] as f64 * ax;
            out[y * ow + x] = (top * (1.0 - ay) + bot * ay) as f32;
        }
    }
    let mass_out: f64 = out.iter().map(|&v| v as f64).sum();
    if mass_out > 0.0 && mass_in > 0.0 {
        let scale = (mass_in / mass_out) as f32;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(Tensor::new(&[oh, ow], out)?)
}

/// Compute the model's saliency for one frame: every attention scale's
/// mask is upsampled to the frame size, renormalized to unit mass, and the
/// scales averaged.
pub fn saliency(cfg: &ModelConfig, params: &Params<f32>, frame: &Tensor<f32>) -> Result<SaliencyMap> {
    let shape = frame.shape();
    if shape != [3, cfg.input_size, cfg.input_size] {
        return Err(EvalError::BadInput {
            detail: format!("frame {shape:?} is not [3, {0}, {0}]", cfg.input_size),
        });
    }
    let (oh, ow) = (cfg.input_size, cfg.input_size);
    let tape = Tape::<f32>::new();
    let bound = bind_params(&tape, params, false);
    let mut batched = vec![0f32; frame.numel()];
    batched.copy_from_slice(frame.data());
    let input = tape.constant(Tensor::new(&[1, 3, oh, ow], batched)?);
    let maps = encode(&tape, cfg, &bound, input)?;
    let mut acc = vec![0f64; oh * ow];
    let mut source_shapes = Vec::with_capacity(maps.len());
    for (s, &map) in maps.iter().enumerate() {
        let out = attend_pool(&tape, cfg, &bound, s, map)?;
        let mask = tape.value(out.mask);
        let (h, w) = (mask.shape()[1], mask.shape()[2]);
        source_shapes.push((h, w));
        let flat = Tensor::new(&[h, w], mask.data().to_vec())?;
        let up = upsample_renormalized(&flat, oh, ow)?;
        for (a, &v) in acc.iter_mut().zip(up.data()) {
            *a += v as f64;
        }
    }
    let scales = maps.len();
    let map = Tensor::new(
        &[oh, ow],
        acc.into_iter().map(|v| (v / scales as f64) as f32).collect::<Vec<f32>>(),
    )?;
    if !map.is_finite() {
        return Err(EvalError::BadInput {
            detail: "saliency map is not finite".into(),
        });
    }
    Ok(SaliencyMap {
        map,
        scales,
        source_shapes,
    })
}

/// Tie-averaged ranks (1-based): equal values share the mean of the
/// positions they occupy.
pub fn ranks_average_ties(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values").then(a.cmp(&b)));
    let mut ranks = vec![0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va.sqrt() * vb.sqrt()))
    }
}

/// Spearman rank correlation with tie-averaged ranks. A constant input has
/// no rank variance; that degenerate case reports 0 with the flag set.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::BadInput {
            detail: format!("rank vectors of {} and {} values", a.len(), b.len()),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::BadInput {
            detail: "non-finite values in rank correlation".into(),
        });
    }
    let ra = ranks_average_ties(a);
    let rb = ranks_average_ties(b);
    match pearson(&ra, &rb) {
        Some(rho) => Ok((rho, false)),
        None => Ok((0.0, true)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub rho: f64,
    /// rho divided by the ceiling.
    pub normalized: f64,
    /// Set when either map had zero rank variance.
    pub degenerate: bool,
}

/// Rank alignment between a model saliency map and a reference map,
/// normalized by an alignment ceiling (1 when the reference is exact).
pub fn saliency_alignment(map: &Tensor<f32>, reference: &Tensor<f32>, ceiling: f64) -> Result<Alignment> {
    if map.shape() != reference.shape() {
        return Err(EvalError::BadInput {
            detail: format!("map {:?} vs reference {:?}", map.shape(), reference.shape()),
        });
    }
    if !(ceiling > 0.0) {
        return Err(EvalError::BadInput {
            detail: format!("ceiling {ceiling} must be positive"),
        });
    }
    let a: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let (rho, degenerate) = spearman(&a, &b)?;
    Ok(Alignment {
        rho,
        normalized: rho / ceiling,
        degenerate,
    })
}

/// Saliency mass split by ground-truth region for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassSplit {
    pub primary_mass: f64,
    pub distractor_mass: f64,
    pub primary_pixels: usize,
    pub distractor_pixels: usize,
}

impl MassSplit {
    /// Mass per pixel inside the persistent sprite.
    pub fn primary_density(&self) -> f64 {
        self.primary_mass / self.primary_pixels.max(1) as f64
    }

    pub fn distractor_density(&self) -> f64 {
        self.distractor_mass / self.distractor_pixels.max(1) as f64
    }
}

/// Accumulate saliency over the primary sprite and over all transient
/// distractors, using a ground-truth id grid at the map's resolution.
pub fn mass_split(map: &Tensor<f32>, mask: &LabelGrid) -> Result<MassSplit> {
    let shape = map.shape();
    if shape.len() != 2 || shape[0] != mask.h || shape[1] != mask.w {
        return Err(EvalError::BadInput {
            detail: format!("map {:?} vs mask {}x{}", shape, mask.h, mask.w),
        });
    }
    let mut out = MassSplit {
        primary_mass: 0.0,
        distractor_mass: 0.0,
        primary_pixels: 0,
        distractor_pixels: 0,
    };
    for (&v, &id) in map.data().iter().zip(&mask.ids) {
        if id as usize == MASK_PRIMARY {
            out.primary_mass += v as f64;
            out.primary_pixels += 1;
        } else if id as usize > MASK_PRIMARY {
            out.distractor_mass += v as f64;
            out.distractor_pixels += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyReport {
    /// Share of scored clips where the primary sprite's saliency density
    /// beats the distractors'.
    pub primary_wins: f64,
    pub mean_primary_density: f64,
    pub mean_distractor_density: f64,
    /// Mean rank alignment against the primary-mask reference map.
    pub mean_alignment: f64,
    pub scored_clips: usize,
    pub skipped_clips: usize,
    /// (clip, frame, primary density, distractor density, alignment)
    pub per_clip: Vec<(usize, usize, f64, f64, f64)>,
}

/// Score saliency over a corpus. Each clip contributes its frame with the
/// most distractor pixels, so the persistent-vs-transient comparison is as
/// informed as the clip allows; clips with no distractor pixels anywhere
/// are skipped and counted.
pub fn evaluate_saliency(
    cfg: &ModelConfig,
    params: &Params<f32>,
    corpus_dir: &Path,
    manifest: &CorpusManifest,
    max_clips: Option<usize>,
) -> Result<SaliencyReport> {
    let n = manifest.entries.len().min(max_clips.unwrap_or(usize::MAX));
    let mut per_clip = Vec::new();
    let mut skipped = 0usize;
    for index in 0..n {
        let clip = manifest.load_clip(corpus_dir, index)?;
        let grids: Vec<LabelGrid> = (0..clip.n_frames())
            .map(|t| LabelGrid::from_mask_frame(&clip, t))
            .collect();
        let counts: Vec<usize> = grids
            .iter()
            .map(|g| g.ids.iter().filter(|&&id| id as usize > MASK_PRIMARY).count())
            .collect();
        let (frame, &best) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("clips have frames");
        if best == 0 {
            skipped += 1;
            continue;
        }
        let input = frame_input(&clip, frame, cfg.input_size);
        let sal = saliency(cfg, params, &input)?;
        let grid = grids[frame].downsample(cfg.input_size, cfg.input_size);
        let split = mass_split(&sal.map, &grid)?;
        let reference = Tensor::new(
            &[cfg.input_size, cfg.input_size],
            grid.ids
                .iter()
                .map(|&id| if id as usize == MASK_PRIMARY { 1.0f32 } else { 0.0 })
                .collect::<Vec<f32>>(),
        )?;
        let alignment = saliency_alignment(&sal.map, &reference, 1.0)?;
        per_clip.push((
            index,
            frame,
            split.primary_density(),
            split.distractor_density(),
            alignment.normalized,
        ));
    }
    if per_clip.is_empty() {
        return Err(EvalError::DegenerateData {
            detail: "no clips with distractor pixels".into(),
        });
    }
    let n = per_clip.len() as f64;
    Ok(SaliencyReport {
        primary_wins: per_clip.iter().filter(|x| x.2 > x.3).count() as f64 / n,
        mean_primary_density: per_clip.iter().map(|x| x.2).sum::<f64>() / n,
        mean_distractor_density: per_clip.iter().map(|x| x.3).sum::<f64>() / n,
        mean_alignment: per_clip.iter().map(|x| x.4).sum::<f64>() / n,
        scored_clips: per_clip.len(),
        skipped_clips: skipped,
        per_clip,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::model::ModelState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_frame(seed: usize) -> Tensor<f32> {
        Tensor::from_fn(&[3, 16, 16], |i| ((i * 31 + seed * 7) % 101) as f32 / 101.0)
    }

    #[test]
    fn saliency_is_nonnegative_unit_mass_and_frame_shaped() {
        let cfg = tiny_config();
        let state = tiny_state(2);
        let sal = saliency(&cfg, &state.online, &test_frame(0)).unwrap();
        assert_eq!(sal.map.shape(), &[16, 16]);
        assert_eq!(sal.scales, 2);
        assert_eq!(sal.source_shapes, vec![(8, 8), (4, 4)]);
        assert!(sal.map.data().iter().all(|&v| v >= 0.0));
        let mass: f64 = sal.map.data().iter().map(|&v| v as f64).sum();
        assert!((mass - 1.0).abs() < 1e-5, "mass {mass}");
    }

    #[test]
    fn fresh_init_attention_gives_a_uniform_map() {
        // the final attention layer starts at zero, so masks are uniform
        let cfg = tiny_config();
        let state = ModelState::init(cfg.clone(), 4).unwrap();
        let sal = saliency(&cfg, &state.online, &test_frame(1)).unwrap();
        let expected = 1.0 / 256.0;
        for &v in sal.map.data() {
            assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn single_scale_map_is_that_scales_upsampled_mask() {
        let cfg = ModelConfig {
            scale_taps: 1,
            ..tiny_config()
        };
        let state = ModelState::init(cfg.clone(), 6).unwrap();
        let frame = test_frame(2);
        let sal = saliency(&cfg, &state.online, &frame).unwrap();
        assert_eq!(sal.scales, 1);
        let mass: f64 = sal.map.data().iter().map(|&v| v as f64).sum();
        assert!((mass - 1.0).abs() < 1e-5);
    }

    #[test]
    fn upsampling_preserves_mass_and_constants() {
        let flat = Tensor::full(&[4, 4], 1.0f32 / 16.0);
        let up = upsample_renormalized(&flat, 16, 16).unwrap();
        for &v in up.data() {
            assert!((v - 1.0 / 256.0).abs() < 1e-7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bumpy = Tensor::from_fn(&[5, 7], |_| rng.gen_range(0.0f32..1.0));
        let mass_in: f64 = bumpy.data().iter().map(|&v| v as f64).sum();
        let up = upsample_renormalized(&bumpy, 23, 31).unwrap();
        let mass_out: f64 = up.data().iter().map(|&v| v as f64).sum();
        assert!((mass_in - mass_out).abs() < 1e-4 * mass_in);
    }

    #[test]
    fn spearman_hits_the_textbook_endpoints() {
        let a = vec![0.1, 0.4, 0.2, 0.9, 0.7];
        let (rho, flag) = spearman(&a, &a).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        assert!(!flag);
        let reversed: Vec<f64> = a.iter().map(|v| -v).collect();
        let (rho, _) = spearman(&a, &reversed).unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
        let constant = vec![0.5; 5];
        let (rho, flag) = spearman(&a, &constant).unwrap();
        assert_eq!(rho, 0.0);
        assert!(flag);
    }

    #[test]
    fn spearman_matches_a_brute_force_oracle() {
        // oracle: counting-based average ranks, then textbook pearson
        fn oracle(x: &[f64]) -> Vec<f64> {
            x.iter()
                .map(|&v| {
                    let less = x.iter().filter(|&&u| u < v).count() as f64;
                    let equal = x.iter().filter(|&&u| u == v).count() as f64;
                    less + (equal - 1.0) / 2.0 + 1.0
                })
                .collect()
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = 50;
            let a: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 7.0).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ra = ranks_average_ties(&a);
            assert_eq!(ra, oracle(&a), "trial {trial}: rank mismatch");
            let (rho, _) = spearman(&a, &b).unwrap();
            let expected = pearson(&oracle(&a), &oracle(&b)).unwrap();
            assert!((rho - expected).abs() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn independent_maps_have_near_zero_mean_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let a: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
            acc += spearman(&a, &b).unwrap().0;
        }
        let mean = acc / trials as f64;
        assert!(mean.abs() < 0.05, "null mean {mean}");
    }

    #[test]
    fn mass_split_separates_regions() {
        let mut ids = vec![0u32; 16];
        ids[0] = 1;
        ids[1] = 1;
        ids[2] = 2;
        let mask = LabelGrid::new(4, 4, ids);
        let map = Tensor::from_fn(&[4, 4], |i| if i < 2 { 0.3 } else if i == 2 { 0.1 } else { 0.3 / 13.0 });
        let split = mass_split(&map, &mask).unwrap();
        assert!((split.primary_mass - 0.6).abs() < 1e-6);
        assert!((split.distractor_mass - 0.1).abs() < 1e-6);
        assert_eq!((split.primary_pixels, split.distractor_pixels), (2, 1));
        assert!((split.primary_density() - 0.3).abs() < 1e-6);
        assert!((split.distractor_density() - 0.1).abs() < 1e-6);
    }
}
