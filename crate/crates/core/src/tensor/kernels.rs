//! Forward and backward kernels over flat buffers.
//!
//! Activations are `[N, C, H, W]` row-major. Gradients flow as `f64` buffers
//! and every backward kernel *adds* into its output so that fan-out in the
//! graph accumulates naturally.

use super::Real;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        out_extent(self.h, self.kh, self.stride, self.dilation, self.padding)
    }

    pub fn out_w(&self) -> usize {
        out_extent(self.w, self.kw, self.stride, self.dilation, self.padding)
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Range of output columns whose input column `o*stride + k*dilation - padding`
    /// falls inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let off = (k * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // o*s + off >= 0  ->  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= extent-1  ->  o <= floor((extent-1-off)/s)
        let top = extent as isize - 1 - off;
        let hi = if top < 0 { -1 } else { top / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, out as isize) as usize;
        (lo.min(hi), hi)
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.c_out * self.out_h() * self.out_w() * self.cin_g() * self.kh * self.kw) as u64
    }
}

pub fn out_extent(size: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> usize {
    let span = dilation * (k - 1) + 1;
    if size + 2 * padding < span {
        0
    } else {
        (size + 2 * padding - span) / stride + 1
    }
}

/// Cross-correlation forward pass.
impl ConvGeom {
    /// Rows of the unfolded input of one group: `cin_g * kh * kw`.
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    /// A 1x1, stride-1, unpadded kernel reads the input planes unchanged.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds the input planes of one group into `col_rows` rows of
    /// `out_h * out_w` samples (zero where the tap falls in the padding).
    fn im2col(&self, planes: &[f64], col: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let p = ho * wo;
        let mut k = 0;
        for cil in 0..self.cin_g() {
            let plane = &planes[cil * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, ho);
                for kx in 0..self.kw {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, wo);
                    let row = &mut col[k * p..][..p];
                    k += 1;
                    if (oy_lo, oy_hi, ox_lo, ox_hi) != (0, ho, 0, wo) {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky * self.dilation - self.padding;
                        let src = &plane[iy * self.w..][..self.w];
                        let dst = &mut row[oy * wo..][..wo];
                        if self.stride == 1 {
                            let off = kx * self.dilation;
                            dst[ox_lo..ox_hi].copy_from_slice(&src[ox_lo + off - self.padding..ox_hi + off - self.padding]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] = src[ox * self.stride + kx * self.dilation - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: adds the unfolded gradient back onto
    /// the input planes of one group.
    fn col2im_add(&self, col: &[f64], planes: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let p = ho * wo;
        let mut k = 0;
        for cil in 0..self.cin_g() {
            let plane = &mut planes[cil * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, ho);
                for kx in 0..self.kw {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, wo);
                    let row = &col[k * p..][..p];
                    k += 1;
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky * self.dilation - self.padding;
                        let dst = &mut plane[iy * self.w..][..self.w];
                        let src = &row[oy * wo..][..wo];
                        for ox in ox_lo..ox_hi {
                            dst[ox * self.stride + kx * self.dilation - self.padding] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// `y += a[0] x[0] + ... + a[3] x[3]`, added term by term in that order.
#[inline]
fn axpy4(y: &mut [f64], a: [f64; 4], x: [&[f64]; 4]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        let mut v = y[i];
        v += a[0] * x0[i];
        v += a[1] * x1[i];
        v += a[2] * x2[i];
        v += a[3] * x3[i];
        y[i] = v;
    }
}

/// `y += sum_k a[k] x[k]` over rows of length `y.len()`, in row order.
fn gemv_rows<'a>(y: &mut [f64], a: &[f64], row: impl Fn(usize) -> &'a [f64]) {
    let mut k = 0;
    while k + 4 <= a.len() {
        axpy4(y, [a[k], a[k + 1], a[k + 2], a[k + 3]], [row(k), row(k + 1), row(k + 2), row(k + 3)]);
        k += 4;
    }
    for k in k..a.len() {
        axpy(y, a[k], row(k));
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

/// Input planes of group `grp` of sample `n`, unfolded unless the kernel is
/// pointwise.
fn group_cols<'a>(g: &ConvGeom, x: &'a [f64], n: usize, grp: usize, scratch: &'a mut Vec<f64>) -> &'a [f64] {
    let hw = g.h * g.w;
    let planes = &x[(n * g.c_in + grp * g.cin_g()) * hw..][..g.cin_g() * hw];
    if g.is_pointwise() {
        return planes;
    }
    scratch.resize(g.col_rows() * g.out_h() * g.out_w(), 0.0);
    g.im2col(planes, scratch);
    scratch
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let (rows, cout_g) = (g.col_rows(), g.cout_g());
    let x: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let w: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    let mut out = vec![T::ZERO; g.n * g.c_out * p];
    let mut scratch = Vec::new();
    let mut acc = vec![0f64; p];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let col = group_cols(g, &x, n, grp, &mut scratch);
            for co in grp * cout_g..(grp + 1) * cout_g {
                let b = bias.map_or(0.0, |b| b[co].as_f64());
                acc.iter_mut().for_each(|a| *a = b);
                gemv_rows(&mut acc, &w[co * rows..][..rows], |k| &col[k * p..][..p]);
                let dst = &mut out[(n * g.c_out + co) * p..][..p];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = T::from_f64(a);
                }
            }
        }
    }
    out
}

/// Adds d(loss)/d(input) into `gx`.
pub fn conv2d_backward_input<T: Real>(g: &ConvGeom, gy: &[f64], w: &[T], gx: &mut [f64]) {
    let p = g.out_h() * g.out_w();
    let (rows, cout_g, hw) = (g.col_rows(), g.cout_g(), g.h * g.w);
    let w: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    let mut colg = vec![0f64; rows * p];
    let mut wk = Vec::with_capacity(cout_g);
    for n in 0..g.n {
        for grp in 0..g.groups {
            colg.iter_mut().for_each(|v| *v = 0.0);
            let co0 = grp * cout_g;
            let gys = &gy[(n * g.c_out + co0) * p..][..cout_g * p];
            for k in 0..rows {
                wk.clear();
                wk.extend((0..cout_g).map(|j| w[(co0 + j) * rows + k]));
                gemv_rows(&mut colg[k * p..][..p], &wk, |j| &gys[j * p..][..p]);
            }
            let planes = &mut gx[(n * g.c_in + grp * g.cin_g()) * hw..][..g.cin_g() * hw];
            if g.is_pointwise() {
                for (d, &v) in planes.iter_mut().zip(&colg) {
                    *d += v;
                }
            } else {
                g.col2im_add(&colg, planes);
            }
        }
    }
}

/// Adds d(loss)/d(kernel) into `gw` and d(loss)/d(bias) into `gb`.
pub fn conv2d_backward_params<T: Real>(
    g: &ConvGeom,
    gy: &[f64],
    x: &[T],
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let p = g.out_h() * g.out_w();
    if let Some(gb) = gb {
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += gy[(n * g.c_out + co) * p..][..p].iter().sum::<f64>();
            }
        }
    }
    let Some(gw) = gw else { return };
    let (rows, cout_g) = (g.col_rows(), g.cout_g());
    let x: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let mut scratch = Vec::new();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let col = group_cols(g, &x, n, grp, &mut scratch);
            for co in grp * cout_g..(grp + 1) * cout_g {
                let grow = &gy[(n * g.c_out + co) * p..][..p];
                for (k, dst) in gw[co * rows..][..rows].iter_mut().enumerate() {
                    *dst += dot(grow, &col[k * p..][..p]);
                }
            }
        }
    }
}

/// Half-pixel-centre interpolation taps for resizing an axis of length
/// `src` to `dst`: output index `i` samples input coordinate
/// `(i + 0.5) * src / dst - 0.5`, clamped to the edges.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Resize every `[h, w]` plane of `x` (there are `planes` of them) to `[oh, ow]`.
pub fn bilinear_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            let r0 = &src[y0 * w..][..w];
            let r1 = &src[y1 * w..][..w];
            for &(x0, x1, fx) in &tx {
                let top = r0[x0].as_f64() * (1.0 - fx) + r0[x1].as_f64() * fx;
                let bot = r1[x0].as_f64() * (1.0 - fx) + r1[x1].as_f64() * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    out
}

pub fn bilinear_backward(gy: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize, gx: &mut [f64]) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &gy[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

/// Softmax across axis 1 of `[n, k, plane]`.
pub fn softmax_forward<T: Real>(x: &[T], n: usize, k: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    let mut buf = vec![0f64; k];
    for b in 0..n {
        let base = b * k * plane;
        for i in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                buf[c] = x[base + c * plane + i].as_f64();
                mx = mx.max(buf[c]);
            }
            let mut s = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for c in 0..k {
                out[base + c * plane + i] = T::from_f64(buf[c] / s);
            }
        }
    }
    out
}

pub fn softmax_backward<T: Real>(y: &[T], gy: &[f64], n: usize, k: usize, plane: usize, gx: &mut [f64]) {
    for b in 0..n {
        let base = b * k * plane;
        for i in 0..plane {
            let mut dot = 0.0;
            for c in 0..k {
                let j = base + c * plane + i;
                dot += y[j].as_f64() * gy[j];
            }
            for c in 0..k {
                let j = base + c * plane + i;
                gx[j] += y[j].as_f64() * (gy[j] - dot);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..=3 {
            for dilation in 1..=3 {
                for padding in 0..=4 {
                    for k in 0..3 {
                        let g = ConvGeom {
                            n: 1,
                            c_in: 1,
                            h: 7,
                            w: 7,
                            c_out: 1,
                            kh: 3,
                            kw: 3,
                            stride,
                            dilation,
                            padding,
                            groups: 1,
                        };
                        let out = g.out_w();
                        let (lo, hi) = g.valid_range(k, 7, out);
                        let expect: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let ix = (o * stride + k * dilation) as isize - padding as isize;
                                (0..7).contains(&ix)
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "s={stride} d={dilation} p={padding} k={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn taps_half_pixel() {
        let t = bilinear_taps(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[3], (1, 1, 0.0));
    }
}
