//! Pooling and resampling kernels shared by the graph ops.

use super::Real;
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(shape: &[usize], k: usize, stride: usize, padding: usize) -> Result<Self> {
        if shape.len() != 4 {
            return dim_err(format!("pool2d expects rank-4 input, got {shape:?}"));
        }
        if k == 0 || stride == 0 {
            return dim_err("pool2d window and stride must be positive");
        }
        if padding >= k {
            return dim_err(format!("pool2d padding {padding} must be smaller than window {k}"));
        }
        let (h, w) = (shape[2], shape[3]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return dim_err(format!(
                "pool window {k} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        Ok(Self {
            planes: shape[0] * shape[1],
            h,
            w,
            k,
            stride,
            padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        })
    }

    /// Clipped input range covered by output index `o` along an axis of length `len`.
    fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize) as usize).min(len);
        (lo, hi)
    }
}

const LANES: usize = 8;

/// Sum with eight independent accumulators so the loop vectorises.
#[inline]
pub(crate) fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for j in 0..LANES {
            acc[j] += c[j];
        }
    }
    let mut total = acc.iter().copied().fold(T::zero(), |a, b| a + b);
    for &v in tail {
        total += v;
    }
    total
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            acc[j] += x[j] * y[j];
        }
    }
    let mut total = acc.iter().copied().fold(T::zero(), |a, b| a + b);
    for (&x, &y) in ta.iter().zip(tb) {
        total += x * y;
    }
    total
}

/// `Σ (x − mean)²` with eight independent accumulators.
#[inline]
pub(crate) fn lane_sq_dev<T: Real>(xs: &[T], mean: T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for j in 0..LANES {
            let d = c[j] - mean;
            acc[j] += d * d;
        }
    }
    let mut total = acc.iter().copied().fold(T::zero(), |a, b| a + b);
    for &v in tail {
        total += (v - mean) * (v - mean);
    }
    total
}

/// True when no element is NaN or infinite.
pub(crate) fn all_finite<T: Real>(xs: &[T]) -> bool {
    // `v - v` is zero for finite values and NaN otherwise.
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for j in 0..LANES {
            acc[j] += c[j] - c[j];
        }
    }
    acc.iter().all(|v| *v == T::zero()) && tail.iter().all(|v| v.is_finite())
}

/// 3-wide window sum along one row with padding 1 (padding excluded).
#[inline(always)]
fn row3_sum<T: Real>(row: &[T], out: &mut [T]) {
    let w = row.len();
    if w == 1 {
        out[0] = row[0];
        return;
    }
    out[0] = row[0] + row[1];
    out[w - 1] = row[w - 2] + row[w - 1];
    for (((o, &a), &b), &c) in out[1..w - 1].iter_mut().zip(&row[..w - 2]).zip(&row[1..w - 1]).zip(&row[2..]) {
        *o = a + b + c;
    }
}

/// 3-wide window maximum along one row with padding 1; `arg` receives the
/// column of the first maximum.
#[inline(always)]
fn row3_max<T: Real>(row: &[T], out: &mut [T], arg: &mut [u32]) {
    let w = row.len();
    for x in [0, w - 1] {
        let (lo, hi) = (x.saturating_sub(1), (x + 2).min(w));
        let mut best = lo;
        for i in lo + 1..hi {
            if row[i] > row[best] {
                best = i;
            }
        }
        out[x] = row[best];
        arg[x] = best as u32;
    }
    if w < 3 {
        return;
    }
    for (x, ((o, a), win)) in out[1..w - 1].iter_mut().zip(&mut arg[1..w - 1]).zip(row.windows(3)).enumerate() {
        let (mut m, mut i) = (win[0], x as u32);
        if win[1] > m {
            m = win[1];
            i = x as u32 + 1;
        }
        if win[2] > m {
            m = win[2];
            i = x as u32 + 2;
        }
        *o = m;
        *a = i;
    }
}

/// Separable fast path for `k = 3`, `padding = 1`.
fn pool3_forward<T: Real>(x: &[T], g: &PoolGeom, kind: PoolKind) -> (Vec<T>, Vec<u32>) {
    let max = kind == PoolKind::Max;
    let (h, w, s) = (g.h, g.w, g.stride);
    let plane_in = h * w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.planes * plane_out];
    let mut arg = if max { vec![0u32; out.len()] } else { Vec::new() };
    let mut hv = vec![T::zero(); plane_in];
    let mut ha = vec![0u32; if max { plane_in } else { 0 }];
    let mut acc = vec![T::zero(); w];
    let mut acc_arg = vec![0u32; w];
    let count = |c: usize, len: usize| (c + 2).min(len) - c.saturating_sub(1);
    let col_count: Vec<T> = (0..w).map(|x| T::from_usize(count(x, w))).collect();
    for p in 0..g.planes {
        let src = &x[p * plane_in..(p + 1) * plane_in];
        for y in 0..h {
            let (row, dst) = (&src[y * w..(y + 1) * w], &mut hv[y * w..(y + 1) * w]);
            if max {
                row3_max(row, dst, &mut ha[y * w..(y + 1) * w]);
            } else {
                row3_sum(row, dst);
            }
        }
        for oy in 0..g.ho {
            let yc = oy * s;
            let (y0, y1) = (yc.saturating_sub(1), (yc + 2).min(h));
            acc.copy_from_slice(&hv[y0 * w..(y0 + 1) * w]);
            if max {
                for (a, &va) in acc_arg.iter_mut().zip(&ha[y0 * w..(y0 + 1) * w]) {
                    *a = (y0 * w) as u32 + va;
                }
                for iy in y0 + 1..y1 {
                    let (rv, ra) = (&hv[iy * w..(iy + 1) * w], &ha[iy * w..(iy + 1) * w]);
                    for (((m, a), &v), &va) in acc.iter_mut().zip(acc_arg.iter_mut()).zip(rv).zip(ra) {
                        if v > *m {
                            *m = v;
                            *a = (iy * w) as u32 + va;
                        }
                    }
                }
            } else {
                for iy in y0 + 1..y1 {
                    for (m, &v) in acc.iter_mut().zip(&hv[iy * w..(iy + 1) * w]) {
                        *m += v;
                    }
                }
            }
            let o_row = p * plane_out + oy * g.wo;
            let rows = T::from_usize(y1 - y0);
            for ox in 0..g.wo {
                let xc = ox * s;
                if max {
                    out[o_row + ox] = acc[xc];
                    arg[o_row + ox] = acc_arg[xc];
                } else {
                    out[o_row + ox] = acc[xc] / (rows * col_count[xc]);
                }
            }
        }
    }
    (out, arg)
}

/// Returns the pooled values and, for max pooling, the flat argmax index
/// (within the input plane) of each output element.
pub(crate) fn pool_forward<T: Real>(x: &[T], g: &PoolGeom, kind: PoolKind) -> (Vec<T>, Vec<u32>) {
    if g.k == 3 && g.padding == 1 && g.stride <= 2 {
        return pool3_forward(x, g, kind);
    }
    pool_forward_direct(x, g, kind)
}

fn pool_forward_direct<T: Real>(x: &[T], g: &PoolGeom, kind: PoolKind) -> (Vec<T>, Vec<u32>) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.planes * plane_out];
    let mut arg = if kind == PoolKind::Max { vec![0u32; out.len()] } else { Vec::new() };
    for p in 0..g.planes {
        let src = &x[p * plane_in..(p + 1) * plane_in];
        for oy in 0..g.ho {
            let (y0, y1) = g.span(oy, g.h);
            for ox in 0..g.wo {
                let (x0, x1) = g.span(ox, g.w);
                let o = p * plane_out + oy * g.wo + ox;
                match kind {
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for iy in y0..y1 {
                            for v in &src[iy * g.w + x0..iy * g.w + x1] {
                                acc += *v;
                            }
                        }
                        out[o] = acc / T::from_usize((y1 - y0) * (x1 - x0));
                    }
                    PoolKind::Max => {
                        let mut best = y0 * g.w + x0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                if src[iy * g.w + ix] > src[best] {
                                    best = iy * g.w + ix;
                                }
                            }
                        }
                        out[o] = src[best];
                        arg[o] = best as u32;
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Average-pool gradient for `k = 3`, `padding = 1`: the count-normalised
/// output gradient is placed at the window centres and box-summed 3×3.
fn avg3_backward<T: Real>(dout: &[T], g: &PoolGeom) -> Vec<T> {
    let (h, w, s) = (g.h, g.w, g.stride);
    let plane = h * w;
    let plane_out = g.ho * g.wo;
    let mut dx = vec![T::zero(); g.planes * plane];
    let mut scaled = vec![T::zero(); plane];
    let mut rows = vec![T::zero(); plane];
    let count = |i: usize, len: usize| (i + 2).min(len) - i.saturating_sub(1);
    let inv: Vec<T> = (0..plane_out)
        .map(|i| T::one() / T::from_usize(count(i / g.wo * s, h) * count(i % g.wo * s, w)))
        .collect();
    for p in 0..g.planes {
        let src = &dout[p * plane_out..(p + 1) * plane_out];
        if s == 1 {
            for ((s, &d), &f) in scaled.iter_mut().zip(src).zip(&inv) {
                *s = d * f;
            }
        } else {
            for (o, (&d, &f)) in src.iter().zip(&inv).enumerate() {
                scaled[(o / g.wo) * s * w + (o % g.wo) * s] = d * f;
            }
        }
        for y in 0..h {
            row3_sum(&scaled[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w]);
        }
        let dst = &mut dx[p * plane..(p + 1) * plane];
        for y in 0..h {
            let d = &mut dst[y * w..(y + 1) * w];
            for iy in y.saturating_sub(1)..(y + 2).min(h) {
                for (d, &r) in d.iter_mut().zip(&rows[iy * w..(iy + 1) * w]) {
                    *d += r;
                }
            }
        }
    }
    dx
}

pub(crate) fn pool_backward<T: Real>(dout: &[T], g: &PoolGeom, kind: PoolKind, arg: &[u32]) -> Vec<T> {
    if kind == PoolKind::Avg && g.k == 3 && g.padding == 1 && g.stride <= 2 {
        return avg3_backward(dout, g);
    }
    pool_backward_direct(dout, g, kind, arg)
}

fn pool_backward_direct<T: Real>(dout: &[T], g: &PoolGeom, kind: PoolKind, arg: &[u32]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut dx = vec![T::zero(); g.planes * plane_in];
    for p in 0..g.planes {
        let dst = &mut dx[p * plane_in..(p + 1) * plane_in];
        for oy in 0..g.ho {
            let (y0, y1) = g.span(oy, g.h);
            for ox in 0..g.wo {
                let o = p * plane_out + oy * g.wo + ox;
                match kind {
                    PoolKind::Avg => {
                        let (x0, x1) = g.span(ox, g.w);
                        let share = dout[o] / T::from_usize((y1 - y0) * (x1 - x0));
                        for iy in y0..y1 {
                            for v in &mut dst[iy * g.w + x0..iy * g.w + x1] {
                                *v += share;
                            }
                        }
                    }
                    PoolKind::Max => dst[arg[o] as usize] += dout[o],
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate under the align-corners convention.
fn taps(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = (pos.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize of `planes` images of `h×w` to `oh×ow`; corner pixels map to corners.
pub fn bilinear_resize<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty: Vec<_> = (0..oh).map(|o| taps(o, oh, h)).collect();
    let tx: Vec<_> = (0..ow).map(|o| taps(o, ow, w)).collect();
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty: Vec<_> = (0..oh).map(|o| taps(o, oh, h)).collect();
    let tx: Vec<_> = (0..ow).map(|o| taps(o, ow, w)).collect();
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                dst[y1 * w + x0] += g * fy * (T::one() - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}
