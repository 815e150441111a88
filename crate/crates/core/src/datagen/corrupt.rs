//! Parametric frame corruptions for robustness curves. All seven kinds are
//! deterministic functions of (frame, kind, severity): no RNG, so curves
//! are exactly reproducible. Severity 1..=5 indexes escalating parameter
//! tables documented on each arm.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DatagenError, Result};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    NearFocusBlur,
    FarFocusBlur,
    Fog,
    MotionBlurXy,
    MotionBlurZ,
    ViewJitter,
    Flash,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::NearFocusBlur,
        CorruptionKind::FarFocusBlur,
        CorruptionKind::Fog,
        CorruptionKind::MotionBlurXy,
        CorruptionKind::MotionBlurZ,
        CorruptionKind::ViewJitter,
        CorruptionKind::Flash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::NearFocusBlur => "near_focus_blur",
            CorruptionKind::FarFocusBlur => "far_focus_blur",
            CorruptionKind::Fog => "fog",
            CorruptionKind::MotionBlurXy => "motion_blur_xy",
            CorruptionKind::MotionBlurZ => "motion_blur_z",
            CorruptionKind::ViewJitter => "view_jitter",
            CorruptionKind::Flash => "flash",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DatagenError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DatagenError::UnknownCorruption(s.to_string()))
    }
}

const BLUR_SIGMA: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
const FOG_ALPHA: [f32; 5] = [0.2, 0.35, 0.5, 0.65, 0.8];
const XY_RADIUS: [usize; 5] = [1, 2, 3, 5, 7];
const ZOOM_MAX: [f64; 5] = [0.03, 0.06, 0.12, 0.24, 0.48];
const JITTER_PX: [isize; 5] = [1, 2, 4, 6, 8];
const FLASH_ADD: [f32; 5] = [0.1, 0.2, 0.32, 0.48, 0.68];

/// Apply one corruption to an [H, W, 3] frame. Output has the same shape
/// and stays inside [0, 1].
pub fn corrupt(frame: &Tensor<f32>, kind: CorruptionKind, severity: u8) -> Result<Tensor<f32>> {
    if !(1..=5).contains(&severity) {
        return Err(DatagenError::BadSeverity(severity));
    }
    let shape = frame.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(DatagenError::Tensor(TensorError::BadRank {
            op: "corrupt",
            expected: 3,
            shape: shape.to_vec(),
        }));
    }
    let (h, w) = (shape[0], shape[1]);
    let src = frame.data();
    let idx = severity as usize - 1;

    let out = match kind {
        CorruptionKind::NearFocusBlur => focus_blur(src, h, w, BLUR_SIGMA[idx], false),
        CorruptionKind::FarFocusBlur => focus_blur(src, h, w, BLUR_SIGMA[idx], true),
        CorruptionKind::Fog => {
            let a = FOG_ALPHA[idx];
            src.iter().map(|&v| v * (1.0 - a) + 0.85 * a).collect()
        }
        CorruptionKind::MotionBlurXy => diagonal_blur(src, h, w, XY_RADIUS[idx]),
        CorruptionKind::MotionBlurZ => zoom_blur(src, h, w, ZOOM_MAX[idx]),
        CorruptionKind::ViewJitter => shift(src, h, w, JITTER_PX[idx], JITTER_PX[idx]),
        CorruptionKind::Flash => {
            let b = FLASH_ADD[idx];
            src.iter().map(|&v| v + b).collect()
        }
    };
    let clamped: Vec<f32> = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor::from_parts(shape.to_vec(), clamped))
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (2.5 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sx = (x + j as isize - r).clamp(0, w as isize - 1);
                    acc += kv * src[((y as usize * w + sx as usize) * 3) + c];
                }
                tmp[(y as usize * w + x as usize) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sy = (y + j as isize - r).clamp(0, h as isize - 1);
                    acc += kv * tmp[((sy as usize * w + x as usize) * 3) + c];
                }
                out[(y as usize * w + x as usize) * 3 + c] = acc;
            }
        }
    }
    out
}

/// Depth-of-field stand-in: blend toward the blurred frame with a vertical
/// ramp, sharp at one edge and fully blurred at the other. `far` blurs the
/// top of the frame, otherwise the bottom.
fn focus_blur(src: &[f32], h: usize, w: usize, sigma: f64, far: bool) -> Vec<f32> {
    let blurred = gaussian_blur(src, h, w, sigma);
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        let mut t = if h > 1 { y as f32 / (h - 1) as f32 } else { 1.0 };
        if far {
            t = 1.0 - t;
        }
        for i in (y * w * 3)..((y + 1) * w * 3) {
            out[i] = src[i] * (1.0 - t) + blurred[i] * t;
        }
    }
    out
}

fn diagonal_blur(src: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut out = vec![0f32; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..3 {
                let mut acc = 0.0;
                for j in -r..=r {
                    let sx = (x + j).clamp(0, w as isize - 1) as usize;
                    let sy = (y + j).clamp(0, h as isize - 1) as usize;
                    acc += src[(sy * w + sx) * 3 + c];
                }
                out[(y as usize * w + x as usize) * 3 + c] = acc * norm;
            }
        }
    }
    out
}

fn bilinear(src: &[f32], h: usize, w: usize, fy: f64, fx: f64, c: usize) -> f32 {
    let fx = fx.clamp(0.0, w as f64 - 1.0);
    let fy = fy.clamp(0.0, h as f64 - 1.0);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = (fx - x0 as f64) as f32;
    let ay = (fy - y0 as f64) as f32;
    let p = |y: usize, x: usize| src[(y * w + x) * 3 + c];
    let top = p(y0, x0) * (1.0 - ax) + p(y0, x1) * ax;
    let bot = p(y1, x0) * (1.0 - ax) + p(y1, x1) * ax;
    top * (1.0 - ay) + bot * ay
}

/// Average over a ramp of center zooms from 1.0 to 1.0 + zmax.
fn zoom_blur(src: &[f32], h: usize, w: usize, zmax: f64) -> Vec<f32> {
    const STEPS: usize = 6;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0f32; src.len()];
    for s in 0..STEPS {
        let z = 1.0 + zmax * s as f64 / (STEPS - 1) as f64;
        for y in 0..h {
            for x in 0..w {
                let sy = cy + (y as f64 - cy) / z;
                let sx = cx + (x as f64 - cx) / z;
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] += bilinear(src, h, w, sy, sx, c);
                }
            }
        }
    }
    for v in &mut out {
        *v /= STEPS as f32;
    }
    out
}

/// Integer translation with replicated edges: out(x, y) = src(x-dx, y-dy).
fn shift(src: &[f32], h: usize, w: usize, dx: isize, dy: isize) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sy = (y - dy).clamp(0, h as isize - 1) as usize;
            let sx = (x - dx).clamp(0, w as isize - 1) as usize;
            let o = (y as usize * w + x as usize) * 3;
            let s = (sy * w + sx) * 3;
            out[o..o + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured_frame(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[h, w, 3], |i| {
            let p = i / 3;
            let (y, x) = (p / w, p % w);
            (0.5 + 0.5 * ((x as f32 * 0.7).sin() * (y as f32 * 0.9).cos())).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn all_kinds_preserve_shape_and_range() {
        let f = textured_frame(24, 24);
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let out = corrupt(&f, kind, sev).unwrap();
                assert_eq!(out.shape(), f.shape(), "{kind} sev {sev}");
                assert!(
                    out.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                    "{kind} sev {sev} out of range"
                );
            }
        }
    }

    #[test]
    fn fog_brightens_black_frames_monotonically() {
        let black = Tensor::<f32>::zeros(&[8, 8, 3]);
        let mean = |t: &Tensor<f32>| t.data().iter().sum::<f32>() / t.numel() as f32;
        let m1 = mean(&corrupt(&black, CorruptionKind::Fog, 1).unwrap());
        let m5 = mean(&corrupt(&black, CorruptionKind::Fog, 5).unwrap());
        assert!(m5 > m1, "{m5} vs {m1}");
    }

    #[test]
    fn view_jitter_inverse_restores_interior() {
        let f = textured_frame(16, 16);
        let sev = 3u8;
        let d = JITTER_PX[sev as usize - 1];
        let jittered = corrupt(&f, CorruptionKind::ViewJitter, sev).unwrap();
        let restored = shift(jittered.data(), 16, 16, -d, -d);
        for y in 0..(16 - d as usize) {
            for x in 0..(16 - d as usize) {
                for c in 0..3 {
                    let i = (y * 16 + x) * 3 + c;
                    assert_eq!(restored[i], f.data()[i], "pixel ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn blur_severity_reduces_total_variation() {
        let f = textured_frame(32, 32);
        let tv = |t: &Tensor<f32>| -> f32 {
            let d = t.data();
            let mut acc = 0.0;
            for y in 0..32 {
                for x in 0..31 {
                    let i = (y * 32 + x) * 3;
                    acc += (d[i + 3] - d[i]).abs();
                }
            }
            acc
        };
        let t1 = tv(&corrupt(&f, CorruptionKind::NearFocusBlur, 1).unwrap());
        let t5 = tv(&corrupt(&f, CorruptionKind::NearFocusBlur, 5).unwrap());
        assert!(t5 < t1, "{t5} vs {t1}");
    }

    #[test]
    fn bad_severity_and_unknown_kind_rejected() {
        let f = textured_frame(8, 8);
        assert!(matches!(
            corrupt(&f, CorruptionKind::Fog, 0),
            Err(DatagenError::BadSeverity(0))
        ));
        assert!(matches!(
            corrupt(&f, CorruptionKind::Fog, 6),
            Err(DatagenError::BadSeverity(6))
        ));
        assert!(matches!(
            "sparkle".parse::<CorruptionKind>(),
            Err(DatagenError::UnknownCorruption(_))
        ));
        assert_eq!("fog".parse::<CorruptionKind>().unwrap(), CorruptionKind::Fog);
    }
}
