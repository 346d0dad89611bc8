//! 2-D cross-correlation kernels (im2col + GEMM, with a direct depthwise path).

use super::Real;
use crate::error::{config_err, dim_err, Result};

/// Stride, padding, dilation and grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 || weight.len() != 4 {
            return dim_err(format!("conv2d expects rank-4 input and weight, got {x:?} and {weight:?}"));
        }
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return config_err(format!("conv2d stride, dilation and groups must be positive: {spec:?}"));
        }
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if cin % spec.groups != 0 || cout % spec.groups != 0 {
            return config_err(format!(
                "groups {} must divide input channels {cin} and output channels {cout}",
                spec.groups
            ));
        }
        if cin_g * spec.groups != cin {
            return dim_err(format!(
                "weight expects {} input channels per group, input has {cin} over {} groups",
                cin_g, spec.groups
            ));
        }
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * spec.padding < span_h || w + 2 * spec.padding < span_w {
            return dim_err(format!(
                "kernel extent {span_h}x{span_w} exceeds padded input {}x{}",
                h + 2 * spec.padding,
                w + 2 * spec.padding
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / spec.groups,
            kh,
            kw,
            ho: (h + 2 * spec.padding - span_h) / spec.stride + 1,
            wo: (w + 2 * spec.padding - span_w) / spec.stride + 1,
            spec,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0 && self.spec.groups == 1
    }

    /// Valid output-column range for kernel column `kx` when stride is 1.
    fn col_range(&self, kx: usize) -> (isize, usize, usize) {
        let off = (kx * self.spec.dilation) as isize - self.spec.padding as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((self.w as isize - off).max(0) as usize).min(self.wo);
        (off, lo.min(hi), hi)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.spec.stride + ky * self.spec.dilation) as isize - self.spec.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

#[inline(always)]
/// Unfolds one group of one image (`cin_g × h × w`) into a `K × P` matrix.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let (p, s) = (g.p(), g.spec.stride);
    for ci in 0..g.cin_g {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (off, lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.in_row(oy, ky) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if s == 1 {
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if lo == hi {
                            // The tap misses the image for every output column.
                            continue;
                        }
                        let start = (lo as isize + off) as usize;
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + off;
                            *d = if ix >= 0 && (ix as usize) < g.w { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
/// Folds a `K × P` column matrix back into an image, accumulating overlaps.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let (p, s) = (g.p(), g.spec.stride);
    for ci in 0..g.cin_g {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let (off, lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if s == 1 {
                        if lo == hi {
                            continue;
                        }
                        let start = (lo as isize + off) as usize;
                        for (d, &v) in drow[start..start + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * s) as isize + off;
                            if ix >= 0 && (ix as usize) < g.w {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(ky, kx, oy, iy, ox_range, ix_start)` for every valid (output row, kernel tap) pairing
/// in a depthwise sweep; `ix = ix_start + (ox - ox_range.start) * stride`.
#[inline(always)]
fn depthwise_taps<F: FnMut(usize, usize, usize, usize, std::ops::Range<usize>, usize)>(g: &ConvGeom, mut f: F) {
    let s = g.spec.stride;
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let off = (kx * g.spec.dilation) as isize - g.spec.padding as isize;
            // ox such that 0 <= ox*s + off < w
            let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
            let hi = if (g.w as isize) <= off {
                0
            } else {
                ((g.w as isize - off - 1) as usize / s + 1).min(g.wo)
            };
            if lo >= hi {
                continue;
            }
            let ix0 = (lo * s) as isize + off;
            for oy in 0..g.ho {
                if let Some(iy) = g.in_row(oy, ky) {
                    f(ky, kx, oy, iy, lo..hi, ix0 as usize);
                }
            }
        }
    }
}

#[inline(always)]
fn forward_im2col<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.cout * g.p()];
    let (k, p) = (g.k(), g.p());
    if g.is_depthwise() {
        let s = g.spec.stride;
        for n in 0..g.n {
            for c in 0..g.cin {
                let xin = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let o = &mut out[(n * g.cout + c) * p..][..p];
                let wc = &weight[c * g.kh * g.kw..][..g.kh * g.kw];
                depthwise_taps(g, |ky, kx, oy, iy, r, ix0| {
                    let wv = wc[ky * g.kw + kx];
                    let orow = &mut o[oy * g.wo..(oy + 1) * g.wo];
                    let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                    if s == 1 {
                        let len = r.len();
                        for (d, &v) in orow[r].iter_mut().zip(&xrow[ix0..ix0 + len]) {
                            *d += wv * v;
                        }
                    } else {
                        for (i, ox) in r.enumerate() {
                            orow[ox] += wv * xrow[ix0 + i * s];
                        }
                    }
                });
            }
        }
        return out;
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let img = &x[(n * g.cin + grp * g.cin_g) * g.h * g.w..][..g.cin_g * g.h * g.w];
            let b: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            let wg = &weight[grp * g.cout_g * k..][..g.cout_g * k];
            let o = &mut out[(n * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
            // SAFETY: slices above have exactly the extents passed to gemm.
            unsafe {
                T::gemm(
                    g.cout_g,
                    k,
                    p,
                    T::one(),
                    wg.as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    o.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
    }
    out
}

#[inline(always)]
fn backward_input_im2col<T: Real>(dout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    let (k, p) = (g.k(), g.p());
    if g.is_depthwise() {
        let s = g.spec.stride;
        for n in 0..g.n {
            for c in 0..g.cin {
                let dxi = &mut dx[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let o = &dout[(n * g.cout + c) * p..][..p];
                let wc = &weight[c * g.kh * g.kw..][..g.kh * g.kw];
                depthwise_taps(g, |ky, kx, oy, iy, r, ix0| {
                    let wv = wc[ky * g.kw + kx];
                    let orow = &o[oy * g.wo..(oy + 1) * g.wo];
                    let xrow = &mut dxi[iy * g.w..(iy + 1) * g.w];
                    if s == 1 {
                        let len = r.len();
                        for (d, &v) in xrow[ix0..ix0 + len].iter_mut().zip(&orow[r]) {
                            *d += wv * v;
                        }
                    } else {
                        for (i, ox) in r.enumerate() {
                            xrow[ix0 + i * s] += wv * orow[ox];
                        }
                    }
                });
            }
        }
        return dx;
    }
    let mut dcol = vec![T::zero(); k * p];
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let wg = &weight[grp * g.cout_g * k..][..g.cout_g * k];
            let o = &dout[(n * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
            let img = &mut dx[(n * g.cin + grp * g.cin_g) * g.h * g.w..][..g.cin_g * g.h * g.w];
            let target: *mut T = if g.is_pointwise() { img.as_mut_ptr() } else { dcol.as_mut_ptr() };
            // SAFETY: target is either `img` (k*p == cin_g*h*w for pointwise) or `dcol`.
            unsafe {
                T::gemm(
                    k,
                    g.cout_g,
                    p,
                    T::one(),
                    wg.as_ptr(),
                    1,
                    k as isize,
                    o.as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    target,
                    p as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                col2im(&dcol, g, img);
            }
        }
    }
    dx
}

#[inline(always)]
fn backward_weight_im2col<T: Real>(dout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut dw = vec![T::zero(); g.cout * k];
    if g.is_depthwise() {
        let s = g.spec.stride;
        for n in 0..g.n {
            for c in 0..g.cin {
                let xin = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let o = &dout[(n * g.cout + c) * p..][..p];
                let dwc = &mut dw[c * g.kh * g.kw..][..g.kh * g.kw];
                depthwise_taps(g, |ky, kx, oy, iy, r, ix0| {
                    let orow = &o[oy * g.wo..(oy + 1) * g.wo];
                    let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                    let acc: T = if s == 1 {
                        let len = r.len();
                        orow[r].iter().zip(&xrow[ix0..ix0 + len]).map(|(&a, &b)| a * b).sum()
                    } else {
                        r.enumerate().map(|(i, ox)| orow[ox] * xrow[ix0 + i * s]).sum()
                    };
                    dwc[ky * g.kw + kx] += acc;
                });
            }
        }
        return dw;
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let img = &x[(n * g.cin + grp * g.cin_g) * g.h * g.w..][..g.cin_g * g.h * g.w];
            let b: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            let o = &dout[(n * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
            let dwg = &mut dw[grp * g.cout_g * k..][..g.cout_g * k];
            // SAFETY: extents match the slices above.
            unsafe {
                T::gemm(
                    g.cout_g,
                    p,
                    k,
                    T::one(),
                    o.as_ptr(),
                    p as isize,
                    1,
                    b.as_ptr(),
                    1,
                    p as isize,
                    T::one(),
                    dwg.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
    }
    dw
}

// Direct stride-1 kernels. Output channels are processed in blocks of `CO`
// and output columns in tiles of `TW`; the accumulator tile stays in registers.
const CO: usize = 8;
const TW: usize = 8;

struct Padded<T> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
}

/// Copies `c` planes of `h×w` into a zero-filled `rows×cols` canvas at offset (`top`, `left`).
#[inline(always)]
fn pad_planes<T: Real>(src: &[T], c: usize, h: usize, w: usize, top: usize, left: usize, rows: usize, cols: usize) -> Padded<T> {
    let mut data = vec![T::zero(); c * rows * cols];
    for ch in 0..c {
        for y in 0..h.min(rows.saturating_sub(top)) {
            let n = w.min(cols.saturating_sub(left));
            let dst = &mut data[(ch * rows + top + y) * cols + left..][..n];
            dst.copy_from_slice(&src[(ch * h + y) * w..][..n]);
        }
    }
    Padded { data, rows, cols }
}

/// Reorders `[cout][K]` weights into `[cout/CO][K][CO]` blocks.
#[inline(always)]
fn block_weights<T: Real>(weight: &[T], cout: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cout * k];
    for cb in 0..cout / CO {
        for kk in 0..k {
            for co in 0..CO {
                out[(cb * k + kk) * CO + co] = weight[(cb * CO + co) * k + kk];
            }
        }
    }
    out
}

/// Stride-1 correlation of a padded image with blocked weights into `cout × ho × wo`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn direct_s1<T: Real>(
    x: &Padded<T>,
    cin: usize,
    wblk: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    d: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let k = cin * kh * kw;
    for cb in 0..cout / CO {
        let wb = &wblk[cb * k * CO..][..k * CO];
        for oy in 0..ho {
            for ox0 in (0..wo).step_by(TW) {
                let mut acc = [[T::zero(); TW]; CO];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let row = &x.data[(ci * x.rows + oy + ky * d) * x.cols..][..x.cols];
                        for kx in 0..kw {
                            let xs: &[T; TW] = row[ox0 + kx * d..][..TW].try_into().unwrap();
                            let wv: &[T; CO] = wb[((ci * kh + ky) * kw + kx) * CO..][..CO].try_into().unwrap();
                            for co in 0..CO {
                                for j in 0..TW {
                                    acc[co][j] += wv[co] * xs[j];
                                }
                            }
                        }
                    }
                }
                let n = TW.min(wo - ox0);
                for (co, a) in acc.iter().enumerate() {
                    out[((cb * CO + co) * ho + oy) * wo + ox0..][..n].copy_from_slice(&a[..n]);
                }
            }
        }
    }
}

impl ConvGeom {
    fn direct_ok(&self) -> bool {
        self.spec.groups == 1 && self.spec.stride == 1 && self.cout % CO == 0
    }

    fn direct_input_ok(&self) -> bool {
        self.direct_ok()
            && self.cin % CO == 0
            && self.spec.padding <= self.spec.dilation * (self.kh - 1)
            && self.spec.padding <= self.spec.dilation * (self.kw - 1)
    }

    fn padded_input<T: Real>(&self, img: &[T]) -> Padded<T> {
        let d = self.spec.dilation;
        let rows = self.ho + (self.kh - 1) * d;
        let cols = self.wo.next_multiple_of(TW) + (self.kw - 1) * d;
        pad_planes(img, self.cin, self.h, self.w, self.spec.padding, self.spec.padding, rows, cols)
    }
}

#[inline(always)]
fn forward_direct<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.p();
    let k = g.k();
    let wblk = block_weights(weight, g.cout, k);
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for n in 0..g.n {
        let xp = g.padded_input(&x[n * g.cin * g.h * g.w..][..g.cin * g.h * g.w]);
        let o = &mut out[n * g.cout * p..][..g.cout * p];
        direct_s1(&xp, g.cin, &wblk, g.cout, g.kh, g.kw, g.spec.dilation, g.ho, g.wo, o);
    }
    out
}

/// Input gradient of a stride-1 convolution: a correlation of the padded
/// output gradient with the spatially flipped, channel-transposed kernel.
#[inline(always)]
fn backward_input_direct<T: Real>(dout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let (kh, kw, d) = (g.kh, g.kw, g.spec.dilation);
    let mut flipped = vec![T::zero(); weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    flipped[((ci * g.cout + co) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                        weight[((co * g.cin + ci) * kh + ky) * kw + kx];
                }
            }
        }
    }
    let k = g.cout * kh * kw;
    let wblk = block_weights(&flipped, g.cin, k);
    let top = d * (kh - 1) - g.spec.padding;
    let left = d * (kw - 1) - g.spec.padding;
    let rows = g.h + (kh - 1) * d;
    let cols = g.w.next_multiple_of(TW) + (kw - 1) * d;
    let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for n in 0..g.n {
        let dp = pad_planes(&dout[n * g.cout * g.p()..][..g.cout * g.p()], g.cout, g.ho, g.wo, top, left, rows, cols);
        let o = &mut dx[n * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
        direct_s1(&dp, g.cout, &wblk, g.cin, kh, kw, d, g.h, g.w, o);
    }
    dx
}

#[inline(always)]
fn forward_any<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    if g.direct_ok() && !g.is_depthwise() {
        forward_direct(x, weight, g)
    } else {
        forward_im2col(x, weight, g)
    }
}

#[inline(always)]
fn backward_input_any<T: Real>(dout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    if g.direct_input_ok() && !g.is_depthwise() {
        backward_input_direct(dout, weight, g)
    } else {
        backward_input_im2col(dout, weight, g)
    }
}

#[inline(always)]
fn backward_weight_any<T: Real>(dout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    backward_weight_im2col(dout, x, g)
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::*;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
        forward_any(x, weight, g)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn backward_input<T: Real>(dout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
        backward_input_any(dout, weight, g)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn backward_weight<T: Real>(dout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
        backward_weight_any(dout, x, g)
    }
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

pub(crate) fn forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::forward(x, weight, g) };
    }
    forward_any(x, weight, g)
}

pub(crate) fn backward_input<T: Real>(dout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::backward_input(dout, weight, g) };
    }
    backward_input_any(dout, weight, g)
}

pub(crate) fn backward_weight<T: Real>(dout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::backward_weight(dout, x, g) };
    }
    backward_weight_any(dout, x, g)
}
