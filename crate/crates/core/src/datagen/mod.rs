//! Synthetic video corpora: sprites moving over drifting textured
//! backgrounds, with exact instance masks and a retrieval-style tag per
//! clip. Clip content is a pure function of (config, seed), so corpora
//! regenerate bitwise identically.

mod corrupt;
pub mod sprites;

pub use corrupt::{corrupt, CorruptionKind};

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{config_fingerprint, derive_seed};
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};
use sprites::{hsv_to_rgb, shape_contains, texture_on, SpritePose, FAMILY_NAMES, N_FAMILIES};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {detail}")]
    BadConfig { detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("manifest error: {detail}")]
    BadManifest { detail: String },
    #[error("corruption severity {0} outside 1..=5")]
    BadSeverity(u8),
    #[error("unknown corruption kind {0:?}")]
    UnknownCorruption(String),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

fn io_err(path: &Path, source: std::io::Error) -> DatagenError {
    DatagenError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    /// Texture family index equals the shape family (class carries both cues).
    Matched,
    /// Texture family drawn independently of the shape.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Square frame edge in pixels.
    pub size: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub n_categories: usize,
    /// Primary sprite diameter as a fraction of the frame edge, [lo, hi].
    pub primary_scale: [f64; 2],
    pub distractor_count: [usize; 2],
    pub distractor_scale: [f64; 2],
    /// Fraction of the clip a distractor stays visible, [lo, hi].
    pub distractor_visible_frac: [f64; 2],
    /// Scales every velocity, spin and background drift; 0 freezes the clip.
    pub motion_amp: f64,
    pub texture_mode: TextureMode,
    /// Fraction of clips whose tag is replaced by a wrong category.
    pub tag_noise: f64,
    pub brightness: [f64; 2],
    pub background_contrast: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 64,
            fps: 8.0,
            duration_s: 3.2,
            n_categories: 10,
            primary_scale: [0.36, 0.56],
            distractor_count: [1, 3],
            distractor_scale: [0.14, 0.22],
            distractor_visible_frac: [0.2, 0.45],
            motion_amp: 1.0,
            texture_mode: TextureMode::Matched,
            tag_noise: 0.0,
            brightness: [0.8, 1.0],
            background_contrast: 0.5,
        }
    }
}

impl GenConfig {
    /// Wider field of view: smaller primary sprite, more clutter. The
    /// regime where aggressive cropping loses the stable object.
    pub fn wide_fov() -> Self {
        Self {
            primary_scale: [0.18, 0.28],
            distractor_count: [2, 4],
            distractor_scale: [0.12, 0.2],
            ..Self::default()
        }
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(DatagenError::BadConfig { detail });
        if self.size < 16 || self.size > 512 {
            return bad(format!("size {} outside 16..=512", self.size));
        }
        if !(self.fps > 0.0) || !(self.duration_s > 0.0) || self.n_frames() < 1 {
            return bad(format!(
                "duration {}s at {} fps yields no frames",
                self.duration_s, self.fps
            ));
        }
        if self.n_categories < 1 || self.n_categories > N_FAMILIES {
            return bad(format!("n_categories {} outside 1..={N_FAMILIES}", self.n_categories));
        }
        for (name, [lo, hi]) in [
            ("primary_scale", self.primary_scale),
            ("distractor_scale", self.distractor_scale),
            ("distractor_visible_frac", self.distractor_visible_frac),
            ("brightness", self.brightness),
        ] {
            if !(lo > 0.0) || hi < lo || hi > 1.5 {
                return bad(format!("{name} range [{lo}, {hi}] invalid"));
            }
        }
        if self.distractor_count[1] < self.distractor_count[0] || self.distractor_count[1] > 8 {
            return bad(format!("distractor_count {:?} invalid", self.distractor_count));
        }
        if !(0.0..=1.0).contains(&self.tag_noise) {
            return bad(format!("tag_noise {} outside [0,1]", self.tag_noise));
        }
        if self.motion_amp < 0.0 || !(0.0..=1.0).contains(&self.background_contrast) {
            return bad("motion_amp must be >= 0 and background_contrast in [0,1]".into());
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        FAMILY_NAMES[..self.n_categories].iter().map(|s| s.to_string()).collect()
    }
}

/// Mask id conventions: 0 background, 1 the persistent primary sprite,
/// 2.. transient distractors.
pub const MASK_BACKGROUND: usize = 0;
pub const MASK_PRIMARY: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// [T, H, W, 3], values in [0, 1].
    pub frames: Tensor<f32>,
    /// [T, H, W], integer sprite ids stored as f32.
    pub masks: Tensor<f32>,
    pub fps: f64,
    pub label: usize,
    pub tag: usize,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 / self.fps
    }

    /// One frame as a flat HWC slice.
    pub fn frame(&self, t: usize) -> &[f32] {
        let stride = self.height() * self.width() * 3;
        &self.frames.data()[t * stride..(t + 1) * stride]
    }

    /// One mask as a flat HW slice of ids.
    pub fn mask(&self, t: usize) -> &[f32] {
        let stride = self.height() * self.width();
        &self.masks.data()[t * stride..(t + 1) * stride]
    }
}

struct SpriteState {
    family: usize,
    tex_family: usize,
    tone_a: [f32; 3],
    tone_b: [f32; 3],
    salt: u64,
    radius: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    angle: f64,
    spin: f64,
    visible: std::ops::Range<usize>,
}

fn draw_sprite(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    family: usize,
    scale: [f64; 2],
    visible: std::ops::Range<usize>,
) -> SpriteState {
    let edge = cfg.size as f64;
    let radius = edge * rng.gen_range(scale[0]..=scale[1]) / 2.0;
    let center = edge / 2.0;
    let place = |rng: &mut ChaCha8Rng| {
        if radius * 2.0 < edge {
            rng.gen_range(radius..edge - radius)
        } else {
            center
        }
    };
    let x = place(rng);
    let y = place(rng);
    let speed = cfg.motion_amp * rng.gen_range(0.4..1.4);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let spin = cfg.motion_amp * rng.gen_range(-0.1..0.1);
    let tex_family = match cfg.texture_mode {
        TextureMode::Matched => family,
        TextureMode::Random => rng.gen_range(0..N_FAMILIES),
    };
    let hue = rng.gen_range(0.0..1.0);
    let sat = rng.gen_range(0.55..0.95);
    let val = rng.gen_range(0.75..1.0);
    let tone_a = hsv_to_rgb(hue, sat, val);
    let tone_b = [tone_a[0] * 0.4, tone_a[1] * 0.4, tone_a[2] * 0.4];
    let salt = rng.gen();
    SpriteState {
        family,
        tex_family,
        tone_a,
        tone_b,
        salt,
        radius,
        x,
        y,
        vx: speed * dir.cos(),
        vy: speed * dir.sin(),
        angle,
        spin,
        visible,
    }
}

struct Background {
    c0: [f32; 3],
    c1: [f32; 3],
    f1: (f64, f64),
    ph1: f64,
    drift1: f64,
    f2: (f64, f64),
    ph2: f64,
    drift2: f64,
    brightness: f64,
    contrast: f64,
}

fn draw_background(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Background {
    let tone = |rng: &mut ChaCha8Rng| {
        hsv_to_rgb(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.15..0.5),
            rng.gen_range(0.35..0.75),
        )
    };
    Background {
        c0: tone(rng),
        c1: tone(rng),
        f1: (rng.gen_range(0.5..2.2), rng.gen_range(0.5..2.2)),
        ph1: rng.gen_range(0.0..std::f64::consts::TAU),
        drift1: cfg.motion_amp * rng.gen_range(-0.25..0.25),
        f2: (rng.gen_range(0.5..2.2), rng.gen_range(0.5..2.2)),
        ph2: rng.gen_range(0.0..std::f64::consts::TAU),
        drift2: cfg.motion_amp * rng.gen_range(-0.25..0.25),
        brightness: rng.gen_range(cfg.brightness[0]..=cfg.brightness[1]),
        contrast: cfg.background_contrast,
    }
}

/// Generate one clip. The first rng draws fix label and tag, then
/// background, primary sprite and distractors, in that order; every field
/// of the result is a deterministic function of (config, seed).
pub fn gen_clip(cfg: &GenConfig, seed: u64) -> Result<VideoClip> {
    gen_clip_inner(cfg, seed, None)
}

/// Cue-conflict variant: force the primary sprite to one shape family and
/// another texture family. The label stays the shape class.
pub fn gen_clip_cue_conflict(
    cfg: &GenConfig,
    seed: u64,
    shape_class: usize,
    texture_class: usize,
) -> Result<VideoClip> {
    if shape_class >= cfg.n_categories || texture_class >= N_FAMILIES {
        return Err(DatagenError::BadConfig {
            detail: format!("cue-conflict classes ({shape_class}, {texture_class}) out of range"),
        });
    }
    gen_clip_inner(cfg, seed, Some((shape_class, texture_class)))
}

fn gen_clip_inner(cfg: &GenConfig, seed: u64, cue_conflict: Option<(usize, usize)>) -> Result<VideoClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.n_categories;
    let t_frames = cfg.n_frames();
    let (h, w) = (cfg.size, cfg.size);

    let label = match cue_conflict {
        Some((shape, _)) => shape,
        None => rng.gen_range(0..k),
    };
    let mut tag = label;
    if rng.gen::<f64>() < cfg.tag_noise && k > 1 {
        tag = (label + rng.gen_range(1..k)) % k;
    }

    let bg = draw_background(&mut rng, cfg);
    let mut primary = draw_sprite(&mut rng, cfg, label, cfg.primary_scale, 0..t_frames);
    if let Some((_, tex)) = cue_conflict {
        primary.tex_family = tex;
    }

    let n_d = rng.gen_range(cfg.distractor_count[0]..=cfg.distractor_count[1]);
    let mut distractors = Vec::with_capacity(n_d);
    for _ in 0..n_d {
        let family = rng.gen_range(0..N_FAMILIES);
        let visible = if cfg.motion_amp == 0.0 {
            0..t_frames
        } else {
            let frac = rng.gen_range(cfg.distractor_visible_frac[0]..=cfg.distractor_visible_frac[1]);
            let len = ((t_frames as f64 * frac).round() as usize).clamp(1, t_frames);
            let t0 = rng.gen_range(0..=t_frames - len);
            t0..t0 + len
        };
        distractors.push(draw_sprite(&mut rng, cfg, family, cfg.distractor_scale, visible));
    }

    let mut frames = vec![0f32; t_frames * h * w * 3];
    let mut masks = vec![0f32; t_frames * h * w];
    let tau = std::f64::consts::TAU;

    for t in 0..t_frames {
        let frame = &mut frames[t * h * w * 3..(t + 1) * h * w * 3];
        let mask = &mut masks[t * h * w..(t + 1) * h * w];
        let tf = t as f64;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let s1 = (tau * (bg.f1.0 * px / w as f64 + bg.f1.1 * py / h as f64) + bg.ph1 + bg.drift1 * tf).sin();
                let s2 = (tau * (bg.f2.0 * px / w as f64 - bg.f2.1 * py / h as f64) + bg.ph2 + bg.drift2 * tf).sin();
                let v = (0.5 + bg.contrast * 0.25 * (s1 + s2)).clamp(0.0, 1.0) as f32;
                let o = (y * w + x) * 3;
                for c in 0..3 {
                    frame[o + c] = bg.c0[c] + (bg.c1[c] - bg.c0[c]) * v;
                }
            }
        }

        // distractors below, primary on top, masks from the same test
        for (i, d) in distractors.iter().enumerate() {
            if d.visible.contains(&t) {
                render_sprite(d, frame, mask, h, w, (MASK_PRIMARY + 1 + i) as f32);
            }
        }
        render_sprite(&primary, frame, mask, h, w, MASK_PRIMARY as f32);

        let b = bg.brightness as f32;
        for v in frame.iter_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }

        step_sprite(&mut primary, w as f64, h as f64);
        for d in distractors.iter_mut() {
            step_sprite(d, w as f64, h as f64);
        }
    }

    Ok(VideoClip {
        frames: Tensor::new(&[t_frames, h, w, 3], frames)?,
        masks: Tensor::new(&[t_frames, h, w], masks)?,
        fps: cfg.fps,
        label,
        tag,
    })
}

fn render_sprite(s: &SpriteState, frame: &mut [f32], mask: &mut [f32], h: usize, w: usize, id: f32) {
    let pose = SpritePose {
        cx: s.x,
        cy: s.y,
        radius: s.radius,
        angle: s.angle,
    };
    let x0 = ((s.x - s.radius - 1.0).floor().max(0.0)) as usize;
    let x1 = ((s.x + s.radius + 1.0).ceil().min(w as f64)) as usize;
    let y0 = ((s.y - s.radius - 1.0).floor().max(0.0)) as usize;
    let y1 = ((s.y + s.radius + 1.0).ceil().min(h as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if shape_contains(s.family, &pose, px, py) {
                let dx = px - s.x;
                let dy = py - s.y;
                let (sa, ca) = (-s.angle).sin_cos();
                let u = (dx * ca - dy * sa) / s.radius;
                let v = (dx * sa + dy * ca) / s.radius;
                let tone = if texture_on(s.tex_family, u, v, s.salt) {
                    s.tone_a
                } else {
                    s.tone_b
                };
                let o = (y * w + x) * 3;
                frame[o..o + 3].copy_from_slice(&tone);
                mask[y * w + x] = id;
            }
        }
    }
}

fn step_sprite(s: &mut SpriteState, w: f64, h: f64) {
    s.x += s.vx;
    s.y += s.vy;
    if s.radius * 2.0 < w {
        if s.x < s.radius {
            s.x = 2.0 * s.radius - s.x;
            s.vx = -s.vx;
        }
        if s.x > w - s.radius {
            s.x = 2.0 * (w - s.radius) - s.x;
            s.vx = -s.vx;
        }
    }
    if s.radius * 2.0 < h {
        if s.y < s.radius {
            s.y = 2.0 * s.radius - s.y;
            s.vy = -s.vy;
        }
        if s.y > h - s.radius {
            s.y = 2.0 * (h - s.radius) - s.y;
            s.vy = -s.vy;
        }
    }
    s.angle += s.spin;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub mask_path: String,
    pub label: usize,
    pub tag: usize,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config_hash: String,
    pub fps: f64,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_file(&dir.join("manifest.json"))
    }

    /// Write the manifest to an arbitrary path; clip paths inside stay
    /// relative to whatever corpus directory the manifest describes.
    pub fn save_file(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| io_err(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_file(&dir.join("manifest.json"), dir)
    }

    /// Load and validate against `corpus_dir`: every referenced file must
    /// exist there and no path may repeat.
    pub fn load_file(path: &Path, corpus_dir: &Path) -> Result<Self> {
        let dir = corpus_dir;
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_slice(&bytes).map_err(|e| DatagenError::BadManifest {
                detail: format!("{}: {e}", path.display()),
            })?;
        let mut seen = std::collections::BTreeSet::new();
        for entry in &manifest.entries {
            for p in [&entry.path, &entry.mask_path] {
                if !seen.insert(p.clone()) {
                    return Err(DatagenError::BadManifest {
                        detail: format!("duplicate path {p:?}"),
                    });
                }
                let full = dir.join(p);
                if !full.is_file() {
                    return Err(DatagenError::BadManifest {
                        detail: format!("missing file {}", full.display()),
                    });
                }
            }
            if entry.label >= manifest.categories.len() || entry.tag >= manifest.categories.len() {
                return Err(DatagenError::BadManifest {
                    detail: format!("label/tag out of range in entry {:?}", entry.path),
                });
            }
        }
        Ok(manifest)
    }

    pub fn load_clip(&self, dir: &Path, index: usize) -> Result<VideoClip> {
        let entry = &self.entries[index];
        let frames = read_tensor::<f32>(&dir.join(&entry.path))?;
        let masks = read_tensor::<f32>(&dir.join(&entry.mask_path))?;
        Ok(VideoClip {
            frames,
            masks,
            fps: self.fps,
            label: entry.label,
            tag: entry.tag,
        })
    }

    /// Like [`Self::load_clip`] but leaves the mask file untouched; masks
    /// read back as zeros. Training only consumes frames.
    pub fn load_clip_frames(&self, dir: &Path, index: usize) -> Result<VideoClip> {
        let entry = &self.entries[index];
        let frames = read_tensor::<f32>(&dir.join(&entry.path))?;
        let masks = Tensor::zeros(&frames.shape()[..3]);
        Ok(VideoClip {
            frames,
            masks,
            fps: self.fps,
            label: entry.label,
            tag: entry.tag,
        })
    }
}

/// Generate `n_clips` clips under `out_dir/clips/` and write the manifest.
/// Clip i is generated from a seed derived for stream i, so the fan-out can
/// run on any number of workers without changing a single byte of output.
pub fn gen_corpus(cfg: &GenConfig, n_clips: usize, out_dir: &Path, seed: u64) -> Result<CorpusManifest> {
    cfg.validate()?;
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| io_err(&clips_dir, e))?;

    let entries: Vec<ManifestEntry> = (0..n_clips)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let clip = gen_clip(cfg, derive_seed(seed, i as u64))?;
            let path = format!("clips/{i:06}.vtns");
            let mask_path = format!("clips/{i:06}.mask.vtns");
            write_tensor(&out_dir.join(&path), &clip.frames)?;
            write_tensor(&out_dir.join(&mask_path), &clip.masks)?;
            Ok(ManifestEntry {
                path,
                mask_path,
                label: clip.label,
                tag: clip.tag,
                duration_s: clip.duration_s(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest {
        seed,
        config_hash: config_fingerprint(cfg),
        fps: cfg.fps,
        categories: cfg.category_names(),
        entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
