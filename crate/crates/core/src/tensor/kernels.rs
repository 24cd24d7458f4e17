//! Slice-level forward and backward kernels. Shapes are validated by the
//! callers in `tape.rs`; everything here assumes consistent geometry.

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Columns of the im2col matrix: one per output position of every sample.
    pub fn columns(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// Lays out every receptive field as a column of a `[C*kh*kw, B*oh*ow]` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.columns();
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_channels + c) * g.height * g.width..];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                dst[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols_n = g.columns();
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.in_channels + c) * g.height * g.width..];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = iy as usize * g.width;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + ix as usize] = dst[base + ix as usize] + src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output [B,Cout,oh,ow], im2col columns)`.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let n = g.columns();
    let k = g.patch_len();
    let mut tmp = vec![T::zero(); g.out_channels * n];
    T::gemm(
        g.out_channels,
        k,
        n,
        T::one(),
        weight,
        k as isize,
        1,
        &cols,
        n as isize,
        1,
        T::zero(),
        &mut tmp,
        n as isize,
        1,
    );
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    for co in 0..g.out_channels {
        let bias_v = bias.map_or(T::zero(), |b| b[co]);
        for b in 0..g.batch {
            let src = &tmp[co * n + b * plane..co * n + (b + 1) * plane];
            let dst = &mut out[(b * g.out_channels + co) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias_v;
            }
        }
    }
    (out, cols)
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(dy: &[T], weight: &[T], cols: &[T], g: &ConvGeom, need_dx: bool) -> ConvGrads<T> {
    let n = g.columns();
    let k = g.patch_len();
    let plane = g.out_plane();
    let mut dtmp = vec![T::zero(); g.out_channels * n];
    let mut dbias = vec![T::zero(); g.out_channels];
    for co in 0..g.out_channels {
        let mut acc = T::zero();
        for b in 0..g.batch {
            let src = &dy[(b * g.out_channels + co) * plane..][..plane];
            let dst = &mut dtmp[co * n + b * plane..co * n + (b + 1) * plane];
            dst.copy_from_slice(src);
            acc = acc + src.iter().copied().sum::<T>();
        }
        dbias[co] = acc;
    }
    let mut dweight = vec![T::zero(); g.out_channels * k];
    T::gemm(
        g.out_channels,
        n,
        k,
        T::one(),
        &dtmp,
        n as isize,
        1,
        cols,
        1,
        n as isize,
        T::zero(),
        &mut dweight,
        k as isize,
        1,
    );
    let mut dx = Vec::new();
    if need_dx {
        let mut dcols = vec![T::zero(); k * n];
        T::gemm(
            k,
            g.out_channels,
            n,
            T::one(),
            weight,
            1,
            k as isize,
            &dtmp,
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        dx = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
        col2im(&dcols, g, &mut dx);
    }
    ConvGrads { dx, dweight, dbias }
}

/// Per-channel statistics over `[B, C, plane]` laid out NCHW.
/// Returns `(mean, biased variance)`.
pub fn channel_moments<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((batch * plane) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            s = s + x[(b * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..batch {
            for &xv in &x[(b * channels + c) * plane..][..plane] {
                let d = xv - m;
                v = v + d * d;
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

pub struct MaxPoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Returns `(output, flat argmax index into x)`; ties keep the first maximum.
pub fn max_pool_forward<T: Scalar>(x: &[T], g: &MaxPoolGeom) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_i = base + oy * g.stride * g.width + ox * g.stride;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let i = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if x[i] > x[best_i] {
                            best_i = i;
                        }
                    }
                }
                out.push(x[best_i]);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Interpolation taps for one axis of a half-pixel bilinear resize.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                frac: T::from_f64(frac),
            }
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in &ty {
            for xt in &tx {
                let top = src[y.lo * w + xt.lo] * (T::one() - xt.frac) + src[y.lo * w + xt.hi] * xt.frac;
                let bot = src[y.hi * w + xt.lo] * (T::one() - xt.frac) + src[y.hi * w + xt.hi] * xt.frac;
                out.push(top * (T::one() - y.frac) + bot * y.frac);
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (yi, y) in ty.iter().enumerate() {
            for (xi, xt) in tx.iter().enumerate() {
                let g = src[yi * ow + xi];
                let gt = g * (T::one() - y.frac);
                let gb = g * y.frac;
                dst[y.lo * w + xt.lo] = dst[y.lo * w + xt.lo] + gt * (T::one() - xt.frac);
                dst[y.lo * w + xt.hi] = dst[y.lo * w + xt.hi] + gt * xt.frac;
                dst[y.hi * w + xt.lo] = dst[y.hi * w + xt.lo] + gb * (T::one() - xt.frac);
                dst[y.hi * w + xt.hi] = dst[y.hi * w + xt.hi] + gb * xt.frac;
            }
        }
    }
    dx
}

/// Non-overlapping `fh x fw` average pooling of each plane.
pub fn avg_pool_down<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, fh: usize, fw: usize) -> Vec<T> {
    let (oh, ow) = (h / fh, w / fw);
    let inv = T::one() / T::from_f64((fh * fw) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ky in 0..fh {
                    for kx in 0..fw {
                        s = s + x[p * h * w + (oy * fh + ky) * w + ox * fw + kx];
                    }
                }
                out[p * oh * ow + oy * ow + ox] = s * inv;
            }
        }
    }
    out
}

/// Per-plane `(min, max - min)`.
pub fn plane_min_range<T: Scalar>(plane: &[T]) -> (T, T) {
    let mut lo = plane[0];
    let mut hi = plane[0];
    for &v in plane {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    (lo, hi - lo)
}
