//! Forward and backward kernels shared by the taped and untaped executors.

use super::{Float, Tensor};
use crate::error::{shape_err, Error, Result};

/// Resolved geometry of one 2-D convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x.len() != 4 || kernel.len() != 4 {
            return Err(shape_err!(
                "conv2d expects 4-D input and kernel, got {:?} and {:?}",
                x,
                kernel
            ));
        }
        let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if kcin != cin {
            return Err(shape_err!(
                "conv2d kernel expects {} input channels, input has {}",
                kcin,
                cin
            ));
        }
        if bias != [cout] {
            return Err(shape_err!("conv2d bias {:?} vs {} outputs", bias, cout));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if pad != (kh - 1) / 2 {
            return Err(Error::InvalidArgument(format!(
                "conv2d padding must be (k-1)/2 = {}, got {pad}",
                (kh - 1) / 2
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(shape_err!("conv2d input {:?} smaller than kernel", x));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kh) / stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    #[inline]
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    #[inline]
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }
}

/// Unfold one image `[cin, h, w]` into `[cin*k*k, ho*wo]`.
fn im2col<T: Float>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `[cin*k*k, ho*wo]` back into `[cin, h, w]`, accumulating overlaps.
fn col2im<T: Float>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let plane = g.out_plane();
    let patch = g.patch();
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * plane;
    let mut out = vec![T::ZERO; g.batch * out_img];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; patch * plane]
    };
    for b in 0..g.batch {
        let img = &x.data()[b * in_img..(b + 1) * in_img];
        let dst = &mut out[b * out_img..(b + 1) * out_img];
        for (co, &bv) in bias.data().iter().enumerate() {
            dst[co * plane..(co + 1) * plane].fill(bv);
        }
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(&g, img, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            patch,
            plane,
            kernel.data(),
            patch as isize,
            1,
            src,
            plane as isize,
            1,
            T::ONE,
            dst,
            plane as isize,
            1,
        );
    }
    Tensor::new(&g.output_shape(), out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeom,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = geom;
    let plane = g.out_plane();
    let patch = g.patch();
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * plane;
    let mut dx = need[0].then(|| vec![T::ZERO; g.batch * in_img]);
    let mut dw = need[1].then(|| vec![T::ZERO; g.cout * patch]);
    let mut db = need[2].then(|| vec![T::ZERO; g.cout]);
    let mut cols = if g.is_pointwise() || !need[1] {
        Vec::new()
    } else {
        vec![T::ZERO; patch * plane]
    };
    let mut dcols = if g.is_pointwise() || !need[0] {
        Vec::new()
    } else {
        vec![T::ZERO; patch * plane]
    };
    for b in 0..g.batch {
        let gy = &dy.data()[b * out_img..(b + 1) * out_img];
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += gy[co * plane..(co + 1) * plane]
                    .iter()
                    .fold(T::ZERO, |s, &v| s + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[b * in_img..(b + 1) * in_img];
            let src: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dW[cout, patch] += dY[cout, plane] · colsᵀ[plane, patch]
            T::gemm(
                g.cout,
                plane,
                patch,
                gy,
                plane as isize,
                1,
                src,
                1,
                plane as isize,
                T::ONE,
                dw,
                patch as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * in_img..(b + 1) * in_img];
            // dcols[patch, plane] = Wᵀ[patch, cout] · dY[cout, plane]
            if g.is_pointwise() {
                T::gemm(
                    patch,
                    g.cout,
                    plane,
                    kernel.data(),
                    1,
                    patch as isize,
                    gy,
                    plane as isize,
                    1,
                    T::ZERO,
                    dimg,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    patch,
                    g.cout,
                    plane,
                    kernel.data(),
                    1,
                    patch as isize,
                    gy,
                    plane as isize,
                    1,
                    T::ZERO,
                    &mut dcols,
                    plane as isize,
                    1,
                );
                col2im(g, &dcols, dimg);
            }
        }
    }
    let shape4 = |s: [usize; 4], v: Vec<T>| Tensor::new(&s, v).expect("conv grad shape");
    ConvGrads {
        input: dx.map(|v| shape4([g.batch, g.cin, g.h, g.w], v)),
        kernel: dw.map(|v| shape4([g.cout, g.cin, g.k, g.k], v)),
        bias: db.map(|v| Tensor::new(&[g.cout], v).expect("bias grad shape")),
    }
}

/// Source taps for one output coordinate of a 2× linear upsampling with the
/// half-pixel (align-corners = false) convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Output pixel `o` samples source coordinate `(o + 0.5) / 2 - 0.5`, clamped
/// to the valid range at the borders.
pub fn upsample_taps(n: usize) -> Vec<Taps> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w1 = src - i0 as f64;
            Taps {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

fn check_4d(x: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if x.len() != 4 {
        return Err(shape_err!("{} expects a 4-D tensor, got {:?}", what, x));
    }
    Ok((x[0], x[1], x[2], x[3]))
}

pub fn upsample2x<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = check_4d(x.shape(), "bilinear_upsample2x")?;
    if h == 0 || w == 0 {
        return Err(shape_err!("bilinear_upsample2x on empty plane {:?}", x.shape()));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; b * c * h2 * w2];
    let mut rowbuf = vec![T::ZERO; h * w2];
    for (p, src) in x.data().chunks_exact(h * w).enumerate() {
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            let d = &mut rowbuf[y * w2..(y + 1) * w2];
            for (o, t) in tx.iter().enumerate() {
                d[o] = T::from_f64(t.w0) * s[t.i0] + T::from_f64(t.w1) * s[t.i1];
            }
        }
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for (oy, t) in ty.iter().enumerate() {
            let (w0, w1) = (T::from_f64(t.w0), T::from_f64(t.w1));
            let r0 = &rowbuf[t.i0 * w2..(t.i0 + 1) * w2];
            let r1 = &rowbuf[t.i1 * w2..(t.i1 + 1) * w2];
            for (ox, d) in dst[oy * w2..(oy + 1) * w2].iter_mut().enumerate() {
                *d = w0 * r0[ox] + w1 * r1[ox];
            }
        }
    }
    Tensor::new(&[b, c, h2, w2], out)
}

pub fn upsample2x_backward<T: Float>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::ZERO; b * c * h * w];
    let mut rowbuf = vec![T::ZERO; h * w2];
    for (p, gy) in dy.data().chunks_exact(h2 * w2).enumerate() {
        rowbuf.fill(T::ZERO);
        for (oy, t) in ty.iter().enumerate() {
            let (w0, w1) = (T::from_f64(t.w0), T::from_f64(t.w1));
            let g = &gy[oy * w2..(oy + 1) * w2];
            for ox in 0..w2 {
                rowbuf[t.i0 * w2 + ox] += w0 * g[ox];
                rowbuf[t.i1 * w2 + ox] += w1 * g[ox];
            }
        }
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let r = &rowbuf[y * w2..(y + 1) * w2];
            for (o, t) in tx.iter().enumerate() {
                d[y * w + t.i0] += T::from_f64(t.w0) * r[o];
                d[y * w + t.i1] += T::from_f64(t.w1) * r[o];
            }
        }
    }
    Tensor::new(in_shape, dx).expect("upsample grad shape")
}

pub fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = check_4d(a.shape(), "concat_channels")?;
    let (bb, cb, hb, wb) = check_4d(b.shape(), "concat_channels")?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(shape_err!(
            "concat_channels {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..ba {
        out.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::new(&[ba, ca + cb, ha, wa], out)
}

/// Repeat a per-channel vector `[C]` over batch and spatial extents.
pub fn expand_channels<T: Float>(
    v: &Tensor<T>,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if v.rank() != 1 {
        return Err(shape_err!("expand_channels expects [C], got {:?}", v.shape()));
    }
    let c = v.len();
    let plane = h * w;
    let mut out = Vec::with_capacity(batch * c * plane);
    for _ in 0..batch {
        for &val in v.data() {
            out.extend(std::iter::repeat_n(val, plane));
        }
    }
    Tensor::new(&[batch, c, h, w], out)
}

pub fn expand_channels_backward<T: Float>(c: usize, dy: &Tensor<T>) -> Tensor<T> {
    let plane = dy.shape()[2] * dy.shape()[3];
    let mut g = vec![T::ZERO; c];
    for (i, chunk) in dy.data().chunks_exact(plane).enumerate() {
        g[i % c] += chunk.iter().fold(T::ZERO, |s, &v| s + v);
    }
    Tensor::new(&[c], g).expect("expand grad shape")
}

pub fn leaky_relu<T: Float>(x: T, slope: T) -> T {
    if x >= T::ZERO {
        x
    } else {
        slope * x
    }
}

/// Truncated, normalized logit: maps [0,1] onto [0,1] through
/// `(L(clip(x)) - L(eps)) / (L(1-eps) - L(eps))`, `L(p) = ln(p/(1-p))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitTransform {
    eps: f64,
    lo: f64,
    span: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl LogitTransform {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "logit epsilon must lie in (0, 0.5), got {eps}"
            )));
        }
        // L(1-eps) = -L(eps); using the symmetric form keeps 0.5 a fixed point.
        let lo = logit(eps);
        Ok(Self {
            eps,
            lo,
            span: -2.0 * lo,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn apply(&self, x: f64) -> f64 {
        if x <= self.eps {
            0.0
        } else if x >= 1.0 - self.eps {
            1.0
        } else {
            (logit(x) - self.lo) / self.span
        }
    }

    /// Derivative; zero where the input is clipped.
    pub fn derivative(&self, x: f64) -> f64 {
        if x < self.eps || x > 1.0 - self.eps {
            0.0
        } else {
            1.0 / (x * (1.0 - x) * self.span)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_rejects_even_kernel_and_bad_padding() {
        let x = [1, 1, 4, 4];
        assert!(ConvGeom::new(&x, &[1, 1, 2, 2], &[1], 1, 0).is_err());
        assert!(ConvGeom::new(&x, &[1, 1, 3, 3], &[1], 1, 0).is_err());
        assert!(ConvGeom::new(&x, &[1, 1, 3, 3], &[1], 3, 1).is_err());
        assert!(ConvGeom::new(&x, &[1, 2, 3, 3], &[1], 1, 1).is_err());
        assert!(ConvGeom::new(&x, &[1, 1, 3, 3], &[2], 1, 1).is_err());
    }

    #[test]
    fn conv_output_size_formula() {
        let g = ConvGeom::new(&[1, 1, 256, 256], &[1, 1, 3, 3], &[1], 2, 1).unwrap();
        assert_eq!(g.output_shape(), [1, 1, 128, 128]);
        let g = ConvGeom::new(&[1, 1, 7, 5], &[1, 1, 5, 5], &[1], 2, 2).unwrap();
        assert_eq!((g.ho, g.wo), (4, 3));
    }

    #[test]
    fn conv_matches_direct_loop() {
        // 2 images, 3 -> 2 channels, 5x5 kernel, stride 2
        let x = Tensor::<f64>::from_fn(&[2, 3, 6, 7], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        let k = Tensor::<f64>::from_fn(&[2, 3, 5, 5], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
        let bias = Tensor::<f64>::new(&[2], vec![0.25, -0.5]).unwrap();
        let y = conv2d(&x, &k, &bias, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 4]);
        for b in 0..2 {
            for co in 0..2 {
                for oy in 0..3 {
                    for ox in 0..4 {
                        let mut s = bias.data()[co];
                        for ci in 0..3 {
                            for ki in 0..5 {
                                for kj in 0..5 {
                                    let iy = (oy * 2 + ki) as isize - 2;
                                    let ix = (ox * 2 + kj) as isize - 2;
                                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 7 {
                                        continue;
                                    }
                                    s += x.data()[((b * 3 + ci) * 6 + iy as usize) * 7 + ix as usize]
                                        * k.data()[((co * 3 + ci) * 5 + ki) * 5 + kj];
                                }
                            }
                        }
                        let got = y.data()[((b * 2 + co) * 3 + oy) * 4 + ox];
                        assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_taps_half_pixel() {
        let t = upsample_taps(2);
        assert_eq!((t[0].i0, t[0].w0), (0, 1.0));
        assert_eq!((t[1].i0, t[1].i1, t[1].w0, t[1].w1), (0, 1, 0.75, 0.25));
        assert_eq!((t[2].i0, t[2].i1, t[2].w0, t[2].w1), (0, 1, 0.25, 0.75));
        assert_eq!((t[3].i0, t[3].i1), (1, 1));
    }

    #[test]
    fn logit_transform_endpoints() {
        let lt = LogitTransform::new(1e-3).unwrap();
        assert_eq!(lt.apply(0.0), 0.0);
        assert_eq!(lt.apply(1e-3), 0.0);
        assert_eq!(lt.apply(1.0), 1.0);
        assert_eq!(lt.apply(0.5), 0.5);
        assert!(LogitTransform::new(0.0).is_err());
        assert!(LogitTransform::new(0.5).is_err());
    }
}
