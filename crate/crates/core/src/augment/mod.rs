//! Temporal view sampling and the two stochastic augmentation profiles.
//!
//! A view set holds augmented crops of frames drawn from one clip: the
//! second view is produced by the second profile, every other view by the
//! first. Each sampled decision lands in a provenance record, and
//! [`replay_view`] rebuilds any view from its record bitwise.

mod image;

pub use image::{
    apply_jitter, color_drop, gaussian_blur, grey_value, hflip, resize_bicubic, solarize, Image,
    JitterFactors,
};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::VideoClip;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("clip too short for sampling: needs {needed_s:.3}s, clip has {clip_s:.3}s")]
    ClipTooShort { needed_s: f64, clip_s: f64 },
    #[error("invalid sampling scheme: {detail}")]
    BadScheme { detail: String },
    #[error("invalid augmentation params: {detail}")]
    BadParams { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// How view times are drawn from a clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingScheme {
    /// One window of `window_s` seconds anchored on the frame grid, placed
    /// uniformly; every view time i.i.d. uniform inside it. Pairwise gaps
    /// concentrate near zero.
    Marginal { window_s: f64, num_views: usize },
    /// Same window, split into `num_views` equal chunks, one time per chunk
    /// in order.
    Uniform { window_s: f64, num_views: usize },
    /// First time uniform, then fixed steps of `gap_s`.
    Delta { gap_s: f64, num_views: usize },
}

impl SamplingScheme {
    pub fn num_views(&self) -> usize {
        match *self {
            SamplingScheme::Marginal { num_views, .. }
            | SamplingScheme::Uniform { num_views, .. }
            | SamplingScheme::Delta { num_views, .. } => num_views,
        }
    }

    /// Seconds of clip the scheme needs.
    pub fn needed_duration(&self) -> f64 {
        match *self {
            SamplingScheme::Marginal { window_s, .. } | SamplingScheme::Uniform { window_s, .. } => window_s,
            SamplingScheme::Delta { gap_s, num_views } => gap_s * (num_views - 1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(AugmentError::BadScheme { detail });
        if self.num_views() < 2 {
            return bad(format!("num_views {} < 2", self.num_views()));
        }
        match *self {
            SamplingScheme::Marginal { window_s, .. } | SamplingScheme::Uniform { window_s, .. } => {
                if !(window_s > 0.0) {
                    return bad(format!("window {window_s}s must be positive"));
                }
            }
            SamplingScheme::Delta { gap_s, .. } => {
                if !(gap_s > 0.0) {
                    return bad(format!("gap {gap_s}s must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Per-primitive firing probabilities for one augmentation profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrimitiveProbs {
    pub crop: f64,
    pub flip: f64,
    pub jitter: f64,
    pub drop: f64,
    pub blur: f64,
    pub solarize: f64,
}

impl Default for PrimitiveProbs {
    fn default() -> Self {
        Self::first_profile()
    }
}

impl PrimitiveProbs {
    /// Heavy-blur profile used for all views except the second.
    pub fn first_profile() -> Self {
        Self {
            crop: 1.0,
            flip: 0.5,
            jitter: 0.8,
            drop: 0.2,
            blur: 1.0,
            solarize: 0.0,
        }
    }

    /// Rare-blur profile with occasional solarization, used for view 2.
    pub fn second_profile() -> Self {
        Self {
            blur: 0.1,
            solarize: 0.2,
            ..Self::first_profile()
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        for (field, p) in [
            ("crop", self.crop),
            ("flip", self.flip),
            ("jitter", self.jitter),
            ("drop", self.drop),
            ("blur", self.blur),
            ("solarize", self.solarize),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::BadParams {
                    detail: format!("{name}.{field} probability {p} outside [0,1]"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub out_size: usize,
    /// Minimum crop area as a fraction of the frame.
    pub crop_min_scale: f64,
    /// Aspect ratio sampled log-uniformly in this range.
    pub aspect_range: [f64; 2],
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    /// Odd square kernel edge; 7 suits 64 px frames, 23 matches 224 px.
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
    pub profile1: PrimitiveProbs,
    pub profile2: PrimitiveProbs,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            out_size: 64,
            crop_min_scale: 0.4,
            aspect_range: [0.75, 4.0 / 3.0],
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            jitter_saturation: 0.2,
            jitter_hue: 0.1,
            blur_kernel: 7,
            blur_sigma: [0.1, 2.0],
            profile1: PrimitiveProbs::first_profile(),
            profile2: PrimitiveProbs::second_profile(),
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(AugmentError::BadParams { detail });
        if self.out_size < 8 {
            return bad(format!("out_size {} < 8", self.out_size));
        }
        if !(self.crop_min_scale > 0.0) || self.crop_min_scale > 1.0 {
            return bad(format!("crop_min_scale {} outside (0,1]", self.crop_min_scale));
        }
        if !(self.aspect_range[0] > 0.0) || self.aspect_range[1] < self.aspect_range[0] {
            return bad(format!("aspect_range {:?} invalid", self.aspect_range));
        }
        if self.blur_kernel % 2 == 0 || self.blur_kernel == 0 {
            return bad(format!("blur_kernel {} must be odd", self.blur_kernel));
        }
        if !(self.blur_sigma[0] > 0.0) || self.blur_sigma[1] < self.blur_sigma[0] {
            return bad(format!("blur_sigma {:?} invalid", self.blur_sigma));
        }
        for m in [
            self.jitter_brightness,
            self.jitter_contrast,
            self.jitter_saturation,
            self.jitter_hue,
        ] {
            if !(0.0..=1.0).contains(&m) {
                return bad(format!("jitter magnitude {m} outside [0,1]"));
            }
        }
        self.profile1.validate("profile1")?;
        self.profile2.validate("profile2")
    }

    fn profile(&self, view_index: usize) -> (&PrimitiveProbs, u8) {
        if view_index == 1 {
            (&self.profile2, 2)
        } else {
            (&self.profile1, 1)
        }
    }
}

/// Map a time to the frame shown at that instant (sample-and-hold).
pub fn frame_for_time(t_s: f64, fps: f64, n_frames: usize) -> usize {
    ((t_s * fps).floor() as isize).clamp(0, n_frames as isize - 1) as usize
}

/// Draw one time per view. Windows anchor on the frame grid so a window of
/// exactly one frame period always covers a single frame.
pub fn sample_times(
    scheme: &SamplingScheme,
    clip_duration_s: f64,
    fps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    scheme.validate()?;
    let needed = scheme.needed_duration();
    if needed > clip_duration_s + 1e-9 {
        return Err(AugmentError::ClipTooShort {
            needed_s: needed,
            clip_s: clip_duration_s,
        });
    }
    let times: Vec<f64> = match *scheme {
        SamplingScheme::Marginal { window_s, num_views } => {
            let w0 = grid_window_start(window_s, clip_duration_s, fps, rng);
            (0..num_views).map(|_| rng.gen_range(w0..=w0 + window_s)).collect()
        }
        SamplingScheme::Uniform { window_s, num_views } => {
            let w0 = grid_window_start(window_s, clip_duration_s, fps, rng);
            let chunk = window_s / num_views as f64;
            (0..num_views)
                .map(|i| rng.gen_range(w0 + i as f64 * chunk..=w0 + (i + 1) as f64 * chunk))
                .collect()
        }
        SamplingScheme::Delta { gap_s, num_views } => {
            let span = gap_s * (num_views - 1) as f64;
            let t0 = rng.gen_range(0.0..=(clip_duration_s - span));
            (0..num_views).map(|i| t0 + i as f64 * gap_s).collect()
        }
    };
    Ok(times.into_iter().map(|t| t.clamp(0.0, clip_duration_s)).collect())
}

fn grid_window_start(window_s: f64, duration_s: f64, fps: f64, rng: &mut ChaCha8Rng) -> f64 {
    let max_start_frames = ((duration_s - window_s) * fps).floor().max(0.0) as u64;
    rng.gen_range(0..=max_start_frames) as f64 / fps
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    /// Realized crop area over frame area; never below `crop_min_scale`.
    pub area_frac: f64,
    /// Aspect ratio as sampled, before integer rounding.
    pub aspect: f64,
    /// True when no sampled rectangle fit and the full frame was used.
    pub fallback: bool,
}

/// Every sampled decision behind one view; enough to replay it bitwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewProvenance {
    pub view_index: usize,
    pub time_s: f64,
    pub frame_index: usize,
    pub profile: u8,
    pub crop: Option<CropRecord>,
    pub flip: bool,
    pub jitter: Option<JitterFactors>,
    pub drop: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

#[derive(Clone, Debug)]
pub struct ViewSet {
    /// One [3, S, S] tensor per view.
    pub views: Vec<Tensor<f32>>,
    pub times_s: Vec<f64>,
    pub provenance: Vec<ViewProvenance>,
}

/// Sample a crop rectangle with area fraction in [s_min, 1] and
/// log-uniform aspect. Width and height round up, which can only grow the
/// area, so the s_min floor is exact. Falls back to the full frame when no
/// sampled rectangle fits within the bounded attempts.
pub fn random_resized_crop(
    img: &Image,
    s_min: f64,
    aspect_range: [f64; 2],
    out_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Image, CropRecord) {
    let frame_area = (img.h * img.w) as f64;
    for _ in 0..10 {
        let area_frac = rng.gen_range(s_min..=1.0);
        let aspect = (rng.gen_range(aspect_range[0].ln()..=aspect_range[1].ln())).exp();
        let target = area_frac * frame_area;
        let cw = (target * aspect).sqrt().ceil() as usize;
        let ch = (target / aspect).sqrt().ceil() as usize;
        if cw == 0 || ch == 0 || cw > img.w || ch > img.h {
            continue;
        }
        let x0 = rng.gen_range(0..=img.w - cw);
        let y0 = rng.gen_range(0..=img.h - ch);
        let record = CropRecord {
            x0,
            y0,
            w: cw,
            h: ch,
            area_frac: (cw * ch) as f64 / frame_area,
            aspect,
            fallback: false,
        };
        let out = resize_bicubic(&img.crop(x0, y0, cw, ch), out_size, out_size);
        return (out, record);
    }
    let record = CropRecord {
        x0: 0,
        y0: 0,
        w: img.w,
        h: img.h,
        area_frac: 1.0,
        aspect: img.w as f64 / img.h as f64,
        fallback: true,
    };
    (resize_bicubic(img, out_size, out_size), record)
}

/// Jitter magnitudes m translate to factors 1 + U[-m, m] (hue: an additive
/// U[-m, m] shift in turns).
fn sample_jitter(params: &AugmentParams, rng: &mut ChaCha8Rng) -> JitterFactors {
    let f = |m: f64, rng: &mut ChaCha8Rng| {
        if m == 0.0 {
            1.0
        } else {
            1.0 + rng.gen_range(-m..=m) as f32
        }
    };
    let brightness = f(params.jitter_brightness, rng);
    let contrast = f(params.jitter_contrast, rng);
    let saturation = f(params.jitter_saturation, rng);
    let hue = if params.jitter_hue == 0.0 {
        0.0
    } else {
        rng.gen_range(-params.jitter_hue..=params.jitter_hue) as f32
    };
    JitterFactors {
        brightness,
        contrast,
        saturation,
        hue,
    }
}

fn build_view(
    clip: &VideoClip,
    params: &AugmentParams,
    view_index: usize,
    time_s: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, ViewProvenance) {
    let (probs, profile) = params.profile(view_index);
    let frame_index = frame_for_time(time_s, clip.fps, clip.n_frames());
    let mut img = Image::from_clip_frame(clip, frame_index);

    let fire = |p: f64, rng: &mut ChaCha8Rng| rng.gen::<f64>() < p;

    let crop = if fire(probs.crop, rng) {
        let (cropped, record) =
            random_resized_crop(&img, params.crop_min_scale, params.aspect_range, params.out_size, rng);
        img = cropped;
        Some(record)
    } else {
        img = resize_bicubic(&img, params.out_size, params.out_size);
        None
    };

    let flip = fire(probs.flip, rng);
    if flip {
        img = hflip(&img);
    }

    let jitter = if fire(probs.jitter, rng) {
        let factors = sample_jitter(params, rng);
        img = apply_jitter(&img, &factors);
        Some(factors)
    } else {
        None
    };

    let drop = fire(probs.drop, rng);
    if drop {
        img = color_drop(&img);
    }

    let blur_sigma = if fire(probs.blur, rng) {
        let sigma = rng.gen_range(params.blur_sigma[0]..=params.blur_sigma[1]);
        img = gaussian_blur(&img, params.blur_kernel, sigma);
        Some(sigma)
    } else {
        None
    };

    let solarized = fire(probs.solarize, rng);
    if solarized {
        img = solarize(&img);
    }

    let prov = ViewProvenance {
        view_index,
        time_s,
        frame_index,
        profile,
        crop,
        flip,
        jitter,
        drop,
        blur_sigma,
        solarize: solarized,
    };
    (img.to_chw_tensor(), prov)
}

/// Sample times, then augment one frame per view. View 1 (0-based) runs the
/// second profile, all other views the first.
pub fn make_views(
    clip: &VideoClip,
    scheme: &SamplingScheme,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<ViewSet> {
    params.validate()?;
    let times = sample_times(scheme, clip.duration_s(), clip.fps, rng)?;
    let mut views = Vec::with_capacity(times.len());
    let mut provenance = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let (view, prov) = build_view(clip, params, i, t, rng);
        views.push(view);
        provenance.push(prov);
    }
    Ok(ViewSet {
        views,
        times_s: times,
        provenance,
    })
}

/// Rebuild a view from its provenance record, bitwise.
pub fn replay_view(clip: &VideoClip, params: &AugmentParams, prov: &ViewProvenance) -> Result<Tensor<f32>> {
    params.validate()?;
    let mut img = Image::from_clip_frame(clip, prov.frame_index);
    img = match &prov.crop {
        Some(c) if !c.fallback => resize_bicubic(&img.crop(c.x0, c.y0, c.w, c.h), params.out_size, params.out_size),
        _ => resize_bicubic(&img, params.out_size, params.out_size),
    };
    if prov.flip {
        img = hflip(&img);
    }
    if let Some(factors) = &prov.jitter {
        img = apply_jitter(&img, factors);
    }
    if prov.drop {
        img = color_drop(&img);
    }
    if let Some(sigma) = prov.blur_sigma {
        img = gaussian_blur(&img, params.blur_kernel, sigma);
    }
    if prov.solarize {
        img = solarize(&img);
    }
    Ok(img.to_chw_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_clip, GenConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn test_clip() -> VideoClip {
        gen_clip(&GenConfig { size: 32, ..GenConfig::default() }, 5).unwrap()
    }

    #[test]
    fn delta_scheme_spaces_views_exactly() {
        let scheme = SamplingScheme::Delta { gap_s: 0.5, num_views: 3 };
        let mut r = rng(1);
        for _ in 0..200 {
            let t = sample_times(&scheme, 3.25, 8.0, &mut r).unwrap();
            assert!((t[1] - t[0] - 0.5).abs() < 1e-12);
            assert!((t[2] - t[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn one_frame_window_keeps_views_on_one_frame() {
        let scheme = SamplingScheme::Marginal { window_s: 0.125, num_views: 3 };
        let mut r = rng(2);
        for _ in 0..200 {
            let t = sample_times(&scheme, 3.25, 8.0, &mut r).unwrap();
            let frames: Vec<usize> = t.iter().map(|&s| frame_for_time(s, 8.0, 26)).collect();
            assert!(frames.iter().all(|&f| f == frames[0]), "{t:?} -> {frames:?}");
        }
    }

    #[test]
    fn marginal_gap_mode_sits_in_smallest_bin() {
        let scheme = SamplingScheme::Marginal { window_s: 2.56, num_views: 3 };
        let mut r = rng(3);
        let mut hist = [0usize; 8];
        for _ in 0..4000 {
            let t = sample_times(&scheme, 3.25, 8.0, &mut r).unwrap();
            for i in 0..t.len() {
                for j in (i + 1)..t.len() {
                    let d = (t[i] - t[j]).abs();
                    let bin = ((d / 2.56) * 8.0).floor().min(7.0) as usize;
                    hist[bin] += 1;
                }
            }
        }
        let max_bin = hist.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
        assert_eq!(max_bin, 0, "{hist:?}");
    }

    #[test]
    fn uniform_scheme_orders_views_by_chunk() {
        let scheme = SamplingScheme::Uniform { window_s: 2.0, num_views: 4 };
        let mut r = rng(4);
        for _ in 0..100 {
            let t = sample_times(&scheme, 3.25, 8.0, &mut r).unwrap();
            assert!(t.windows(2).all(|p| p[0] <= p[1]), "{t:?}");
        }
    }

    #[test]
    fn short_clip_rejected() {
        let scheme = SamplingScheme::Marginal { window_s: 2.56, num_views: 3 };
        let err = sample_times(&scheme, 1.0, 8.0, &mut rng(5)).unwrap_err();
        assert!(matches!(err, AugmentError::ClipTooShort { .. }));
        let delta = SamplingScheme::Delta { gap_s: 0.75, num_views: 3 };
        assert!(sample_times(&delta, 1.0, 8.0, &mut rng(5)).is_err());
    }

    #[test]
    fn crop_area_floor_is_exact() {
        let img = Image::new(32, 32, vec![0.5; 32 * 32 * 3]);
        let mut r = rng(6);
        for _ in 0..1000 {
            let (_, rec) = random_resized_crop(&img, 0.4, [0.75, 4.0 / 3.0], 16, &mut r);
            assert!(rec.area_frac >= 0.4, "{rec:?}");
            assert!((0.75..=4.0 / 3.0).contains(&rec.aspect));
        }
    }

    #[test]
    fn full_scale_square_crop_is_plain_resize() {
        let clip = test_clip();
        let img = Image::from_clip_frame(&clip, 0);
        let mut r = rng(7);
        let (out, rec) = random_resized_crop(&img, 1.0, [1.0, 1.0], 16, &mut r);
        assert_eq!(out, resize_bicubic(&img, 16, 16));
        assert_eq!((rec.w, rec.h), (32, 32));
    }

    #[test]
    fn zero_probability_views_are_raw_resized_frames() {
        let clip = test_clip();
        let off = PrimitiveProbs {
            crop: 0.0,
            flip: 0.0,
            jitter: 0.0,
            drop: 0.0,
            blur: 0.0,
            solarize: 0.0,
        };
        let params = AugmentParams {
            out_size: 16,
            profile1: off,
            profile2: off,
            ..AugmentParams::default()
        };
        let scheme = SamplingScheme::Marginal { window_s: 2.56, num_views: 3 };
        let vs = make_views(&clip, &scheme, &params, &mut rng(8)).unwrap();
        for (view, prov) in vs.views.iter().zip(&vs.provenance) {
            let raw = resize_bicubic(&Image::from_clip_frame(&clip, prov.frame_index), 16, 16);
            assert_eq!(view, &raw.to_chw_tensor());
        }
    }

    #[test]
    fn provenance_replay_is_bitwise() {
        let clip = test_clip();
        let params = AugmentParams { out_size: 24, ..AugmentParams::default() };
        let scheme = SamplingScheme::Marginal { window_s: 2.56, num_views: 3 };
        for seed in 0..30 {
            let vs = make_views(&clip, &scheme, &params, &mut rng(seed)).unwrap();
            for (view, prov) in vs.views.iter().zip(&vs.provenance) {
                let replayed = replay_view(&clip, &params, prov).unwrap();
                assert_eq!(view, &replayed, "seed {seed} view {}", prov.view_index);
            }
        }
    }

    #[test]
    fn second_view_uses_second_profile() {
        let clip = test_clip();
        let params = AugmentParams::default();
        let scheme = SamplingScheme::Marginal { window_s: 2.56, num_views: 3 };
        let vs = make_views(&clip, &scheme, &params, &mut rng(9)).unwrap();
        assert_eq!(vs.provenance[0].profile, 1);
        assert_eq!(vs.provenance[1].profile, 2);
        assert_eq!(vs.provenance[2].profile, 1);
    }

    #[test]
    fn views_stay_in_range_and_shape() {
        let clip = test_clip();
        let params = AugmentParams { out_size: 16, ..AugmentParams::default() };
        let scheme = SamplingScheme::Uniform { window_s: 2.0, num_views: 3 };
        for seed in 0..20 {
            let vs = make_views(&clip, &scheme, &params, &mut rng(seed)).unwrap();
            assert_eq!(vs.views.len(), 3);
            for (view, &t) in vs.views.iter().zip(&vs.times_s) {
                assert_eq!(view.shape(), &[3, 16, 16]);
                assert!(view.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!((0.0..=clip.duration_s()).contains(&t));
            }
        }
    }
}
