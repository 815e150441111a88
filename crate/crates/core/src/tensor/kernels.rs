//! Scalar compute kernels shared by the tape ops.
//!
//! All kernels accumulate into their output slice and are deterministic:
//! parallel sections only ever write disjoint regions, and reductions run
//! in a fixed order independent of thread count.

use rayon::prelude::*;

use super::Scalar;

/// Rows below this many multiply-adds stay single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<E: Scalar>(out: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let row = |(i, orow): (usize, &mut [E])| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (dot products of contiguous rows)
pub fn mm_nt<E: Scalar>(out: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let row = |(i, orow): (usize, &mut [E])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn mm_tn<E: Scalar>(out: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let row = |(kk, orow): (usize, &mut [E])| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == E::zero() {
                continue;
            }
            let brow = &b[i * n..i * n + n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Geometry of one conv2d application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || k_h == 0 || k_w == 0 {
            return None;
        }
        let eff_h = in_h + 2 * pad;
        let eff_w = in_w + 2 * pad;
        if eff_h < k_h || eff_w < k_w {
            return None;
        }
        Some(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            stride,
            pad,
            out_h: (eff_h - k_h) / stride + 1,
            out_w: (eff_w - k_w) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, out_h*out_w]. Zero padding.
pub fn im2col<E: Scalar>(x: &[E], g: &ConvGeom, cols: &mut [E]) {
    debug_assert_eq!(x.len(), g.in_c * g.in_h * g.in_w);
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_pixels());
    let pixels = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((c * g.k_h + kh) * g.k_w + kw) * pixels;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        for d in dst.iter_mut() {
                            *d = E::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[(iy as usize) * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlaps.
pub fn col2im_acc<E: Scalar>(cols: &[E], g: &ConvGeom, x_grad: &mut [E]) {
    debug_assert_eq!(x_grad.len(), g.in_c * g.in_h * g.in_w);
    let pixels = g.out_pixels();
    for c in 0..g.in_c {
        let plane = &mut x_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((c * g.k_h + kh) * g.k_w + kw) * pixels;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[(iy as usize) * g.in_w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv2d forward. x: [B,C,H,W], w: [O,C,kh,kw], bias: [O] optional.
pub fn conv2d_forward<E: Scalar>(x: &[E], w: &[E], bias: Option<&[E]>, g: &ConvGeom, batch: usize) -> Vec<E> {
    let in_stride = g.in_c * g.in_h * g.in_w;
    let out_stride = g.out_c * g.out_pixels();
    let mut out = vec![E::zero(); batch * out_stride];
    let run = |(b, y): (usize, &mut [E])| {
        let mut cols = vec![E::zero(); g.patch_len() * g.out_pixels()];
        im2col(&x[b * in_stride..(b + 1) * in_stride], g, &mut cols);
        if let Some(bias) = bias {
            let pixels = g.out_pixels();
            for (o, yo) in y.chunks_mut(pixels).enumerate() {
                for v in yo.iter_mut() {
                    *v = bias[o];
                }
            }
        }
        mm_nn(y, w, &cols, g.out_c, g.patch_len(), g.out_pixels());
    };
    if batch > 1 {
        out.par_chunks_mut(out_stride).enumerate().for_each(run);
    } else {
        out.chunks_mut(out_stride).enumerate().for_each(run);
    }
    out
}

/// Batched conv2d backward. Returns (dx, dw, db).
///
/// Weight gradients are accumulated per fixed-size batch chunk and the
/// chunks are then summed in index order, so results do not depend on the
/// rayon pool size.
pub fn conv2d_backward<E: Scalar>(
    x: &[E],
    w: &[E],
    dy: &[E],
    g: &ConvGeom,
    batch: usize,
    need_dx: bool,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    const CHUNK: usize = 8;
    let in_stride = g.in_c * g.in_h * g.in_w;
    let out_stride = g.out_c * g.out_pixels();
    let w_len = g.out_c * g.patch_len();

    let mut dx = vec![E::zero(); if need_dx { batch * in_stride } else { 0 }];
    let starts: Vec<usize> = (0..batch).step_by(CHUNK).collect();

    let chunk_results: Vec<(Vec<E>, Vec<E>)> = starts
        .par_iter()
        .map(|&b0| {
            let b1 = (b0 + CHUNK).min(batch);
            let mut dw = vec![E::zero(); w_len];
            let mut db = vec![E::zero(); g.out_c];
            let mut cols = vec![E::zero(); g.patch_len() * g.out_pixels()];
            for b in b0..b1 {
                let dyb = &dy[b * out_stride..(b + 1) * out_stride];
                im2col(&x[b * in_stride..(b + 1) * in_stride], g, &mut cols);
                // dw[o, ck] += dy[o, p] * cols[ck, p]
                mm_nt(&mut dw, dyb, &cols, g.out_c, g.out_pixels(), g.patch_len());
                for (o, dyo) in dyb.chunks(g.out_pixels()).enumerate() {
                    for &v in dyo {
                        db[o] += v;
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![E::zero(); w_len];
    let mut db = vec![E::zero(); g.out_c];
    for (cw, cb) in &chunk_results {
        for (d, &v) in dw.iter_mut().zip(cw) {
            *d += v;
        }
        for (d, &v) in db.iter_mut().zip(cb) {
            *d += v;
        }
    }

    if need_dx {
        dx.par_chunks_mut(in_stride).enumerate().for_each(|(b, dxb)| {
            let dyb = &dy[b * out_stride..(b + 1) * out_stride];
            // dcols[ck, p] = w[o, ck]^T dy[o, p]
            let mut dcols = vec![E::zero(); g.patch_len() * g.out_pixels()];
            mm_tn(&mut dcols, w, dyb, g.out_c, g.patch_len(), g.out_pixels());
            col2im_acc(&dcols, g, dxb);
        });
    }

    (dx, dw, db)
}

/// Row-wise softmax with max subtraction. x, out: [rows, cols].
pub fn softmax_rows<E: Scalar>(x: &[E], out: &mut [E], cols: usize) {
    debug_assert_eq!(x.len(), out.len());
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = xr.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
        let mut denom = E::zero();
        for (&v, o) in xr.iter().zip(or.iter_mut()) {
            let e = (v - m).exp();
            *o = e;
            denom += e;
        }
        for o in or.iter_mut() {
            *o /= denom;
        }
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<E: Scalar>(x: &[E], out: &mut [E], cols: usize) {
    debug_assert_eq!(x.len(), out.len());
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = xr.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
        let mut denom = E::zero();
        for &v in xr {
            denom += (v - m).exp();
        }
        let lse = m + denom.ln();
        for (&v, o) in xr.iter().zip(or.iter_mut()) {
            *o = v - lse;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_variants_agree_on_transposes() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut nn = vec![0.0; 4];
        mm_nn(&mut nn, &a, &b, 2, 3, 2);
        // b^T laid out as [2,3]
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = vec![0.0; 4];
        mm_nt(&mut nt, &a, &bt, 2, 3, 2);
        assert_eq!(nn, nt);
        // a^T laid out as [3,2]; tn(aT, b) over m=3 reproduces a*b with m<->k swapped
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = vec![0.0; 4];
        mm_tn(&mut tn, &at, &b, 3, 2, 2);
        assert_eq!(nn, tn);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        // one channel, 1x1 kernel of weight 1
        let g = ConvGeom::new(1, 3, 3, 1, 1, 1, 1, 0).unwrap();
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let y = conv2d_forward(&x, &[1.0], None, &g, 1);
        assert_eq!(x, y);
    }

    #[test]
    fn softmax_rows_uniform_on_zeros() {
        let x = vec![0.0f64; 4];
        let mut y = vec![0.0; 4];
        softmax_rows(&x, &mut y, 4);
        for &v in &y {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
