//! Owned HWC float images and the augmentation primitives that act on
//! them. Everything stays in [0, 1] and preserves the HWC layout.

use crate::datagen::VideoClip;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// h * w * 3, row-major RGB.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), h * w * 3);
        Self { h, w, data }
    }

    pub fn from_clip_frame(clip: &VideoClip, t: usize) -> Self {
        Self::new(clip.height(), clip.width(), clip.frame(t).to_vec())
    }

    pub fn from_hwc_tensor(t: &Tensor<f32>) -> Self {
        debug_assert_eq!(t.rank(), 3);
        debug_assert_eq!(t.shape()[2], 3);
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn to_hwc_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.h, self.w, 3], self.data.clone()).expect("consistent dims")
    }

    /// [3, H, W] layout for the encoder.
    pub fn to_chw_tensor(&self) -> Tensor<f32> {
        let mut out = vec![0f32; self.data.len()];
        let hw = self.h * self.w;
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        Tensor::new(&[3, self.h, self.w], out).expect("consistent dims")
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + c]
    }

    pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Image {
        debug_assert!(x0 + cw <= self.w && y0 + ch <= self.h);
        let mut data = Vec::with_capacity(cw * ch * 3);
        for y in y0..y0 + ch {
            let row = &self.data[(y * self.w + x0) * 3..(y * self.w + x0 + cw) * 3];
            data.extend_from_slice(row);
        }
        Image::new(ch, cw, data)
    }
}

/// Catmull-Rom cubic kernel (a = -0.5), the documented resampler for all
/// "bicubic" resizes in this crate. Interpolating and a partition of unity,
/// so constant images resize to themselves.
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

fn axis_taps(out_len: usize, src_len: usize) -> Vec<([usize; 4], [f32; 4])> {
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * src_len as f64 / out_len as f64 - 0.5;
            let base = s.floor() as isize;
            let mut idx = [0usize; 4];
            let mut wt = [0f32; 4];
            for i in 0..4 {
                let k = base - 1 + i as isize;
                idx[i] = k.clamp(0, src_len as isize - 1) as usize;
                wt[i] = cubic(s - k as f64) as f32;
            }
            (idx, wt)
        })
        .collect()
}

/// Bicubic resize to (oh, ow), then clamp to [0, 1] since cubic kernels
/// overshoot at edges.
pub fn resize_bicubic(img: &Image, oh: usize, ow: usize) -> Image {
    let xt = axis_taps(ow, img.w);
    let yt = axis_taps(oh, img.h);

    // horizontal pass
    let mut tmp = vec![0f32; img.h * ow * 3];
    for y in 0..img.h {
        for (x, (idx, wt)) in xt.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0f32;
                for i in 0..4 {
                    acc += wt[i] * img.at(y, idx[i], c);
                }
                tmp[(y * ow + x) * 3 + c] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0f32; oh * ow * 3];
    for (y, (idx, wt)) in yt.iter().enumerate() {
        for x in 0..ow {
            for c in 0..3 {
                let mut acc = 0f32;
                for i in 0..4 {
                    acc += wt[i] * tmp[(idx[i] * ow + x) * 3 + c];
                }
                out[(y * ow + x) * 3 + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(oh, ow, out)
}

pub fn hflip(img: &Image) -> Image {
    let mut out = vec![0f32; img.data.len()];
    for y in 0..img.h {
        for x in 0..img.w {
            let src = (y * img.w + x) * 3;
            let dst = (y * img.w + (img.w - 1 - x)) * 3;
            out[dst..dst + 3].copy_from_slice(&img.data[src..src + 3]);
        }
    }
    Image::new(img.h, img.w, out)
}

/// x -> x for x < 0.5, 1 - x otherwise, per channel.
pub fn solarize(img: &Image) -> Image {
    let data = img
        .data
        .iter()
        .map(|&v| if v < 0.5 { v } else { 1.0 - v })
        .collect();
    Image::new(img.h, img.w, data)
}

/// ITU-R 601 luma, the documented grey-scale reduction.
pub fn grey_value(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn color_drop(img: &Image) -> Image {
    let mut out = vec![0f32; img.data.len()];
    for p in 0..img.h * img.w {
        let g = grey_value(img.data[p * 3], img.data[p * 3 + 1], img.data[p * 3 + 2]);
        out[p * 3..p * 3 + 3].fill(g);
    }
    Image::new(img.h, img.w, out)
}

/// Square gaussian blur; the 1-D kernel is normalized to sum 1, so the
/// separable product also sums to 1 and constant frames pass through.
pub fn gaussian_blur(img: &Image, kernel: usize, sigma: f64) -> Image {
    debug_assert!(kernel % 2 == 1);
    let r = (kernel / 2) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }

    let (h, w) = (img.h as isize, img.w as isize);
    let mut tmp = vec![0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0f32;
                for (i, &kv) in k.iter().enumerate() {
                    let sx = (x + i as isize - r).clamp(0, w - 1);
                    acc += kv * img.data[((y * w + sx) * 3) as usize + c];
                }
                tmp[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    let mut out = vec![0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0f32;
                for (i, &kv) in k.iter().enumerate() {
                    let sy = (y + i as isize - r).clamp(0, h - 1);
                    acc += kv * tmp[((sy * w + x) * 3) as usize + c];
                }
                out[((y * w + x) * 3) as usize + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(img.h, img.w, out)
}

/// The four jitter factors actually applied to a view, recorded for replay.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JitterFactors {
    /// Multiplies every channel.
    pub brightness: f32,
    /// Blends between the frame's mean grey and the pixel.
    pub contrast: f32,
    /// Blends between the pixel's grey and the pixel.
    pub saturation: f32,
    /// Added to HSV hue, in turns.
    pub hue: f32,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation in RGB, hue in HSV, applied in that
/// fixed order. Deterministic given the factors, so provenance replay is
/// exact.
pub fn apply_jitter(img: &Image, f: &JitterFactors) -> Image {
    let mut data = img.data.clone();
    for v in &mut data {
        *v = (*v * f.brightness).clamp(0.0, 1.0);
    }
    let mean_grey = {
        let mut acc = 0f64;
        for p in 0..img.h * img.w {
            acc += grey_value(data[p * 3], data[p * 3 + 1], data[p * 3 + 2]) as f64;
        }
        (acc / (img.h * img.w) as f64) as f32
    };
    for v in &mut data {
        *v = (mean_grey + f.contrast * (*v - mean_grey)).clamp(0.0, 1.0);
    }
    for p in 0..img.h * img.w {
        let g = grey_value(data[p * 3], data[p * 3 + 1], data[p * 3 + 2]);
        for c in 0..3 {
            data[p * 3 + c] = (g + f.saturation * (data[p * 3 + c] - g)).clamp(0.0, 1.0);
        }
    }
    if f.hue != 0.0 {
        for p in 0..img.h * img.w {
            let (h, s, v) = rgb_to_hsv(data[p * 3], data[p * 3 + 1], data[p * 3 + 2]);
            let (r, g, b) = hsv_to_rgb(h + f.hue, s, v);
            data[p * 3] = r.clamp(0.0, 1.0);
            data[p * 3 + 1] = g.clamp(0.0, 1.0);
            data[p * 3 + 2] = b.clamp(0.0, 1.0);
        }
    }
    Image::new(img.h, img.w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_img(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3)
            .map(|i| ((i * 37 % 101) as f32) / 100.0)
            .collect();
        Image::new(h, w, data)
    }

    #[test]
    fn solarize_matches_pointwise_formula() {
        let img = Image::new(1, 3, vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.5, 0.5, 0.5]);
        let out = solarize(&img);
        assert_eq!(out.data[0], 0.25);
        assert_eq!(out.data[3], 0.25);
        assert_eq!(out.data[6], 0.5);
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = test_img(5, 7);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn color_drop_equalizes_channels() {
        let out = color_drop(&test_img(4, 4));
        for p in 0..16 {
            assert_eq!(out.data[p * 3], out.data[p * 3 + 1]);
            assert_eq!(out.data[p * 3], out.data[p * 3 + 2]);
        }
    }

    #[test]
    fn blur_preserves_constant_frames() {
        let img = Image::new(6, 6, vec![0.42; 6 * 6 * 3]);
        let out = gaussian_blur(&img, 7, 1.3);
        for &v in &out.data {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_preserves_constant_frames_and_range() {
        let img = Image::new(9, 9, vec![0.6; 9 * 9 * 3]);
        let out = resize_bicubic(&img, 16, 16);
        for &v in &out.data {
            assert!((v - 0.6).abs() < 1e-5);
        }
        let textured = test_img(11, 13);
        let out = resize_bicubic(&textured, 32, 32);
        assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identity_jitter_changes_nothing() {
        let img = test_img(6, 6);
        let out = apply_jitter(&img, &JitterFactors::IDENTITY);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn chw_conversion_transposes_channels() {
        let img = test_img(3, 2);
        let chw = img.to_chw_tensor();
        assert_eq!(chw.shape(), &[3, 3, 2]);
        for y in 0..3 {
            for x in 0..2 {
                for c in 0..3 {
                    assert_eq!(chw.data()[c * 6 + y * 2 + x], img.at(y, x, c));
                }
            }
        }
    }
}
