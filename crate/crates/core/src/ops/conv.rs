use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::ops::linalg::gemm;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Geometry of a sliding window over one `[c, h, w]` image.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!(
                "window {}x{} stride {} pad {} does not fit {}x{}",
                kh,
                kw,
                stride,
                pad,
                h,
                w
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source coordinate along one axis, `None` when it falls in the padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Output columns `lo..hi` whose source column for kernel offset `kj`
    /// lies inside the image; source of `ox` is `ox·stride + kj - pad`.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self
            .pad
            .saturating_sub(kj)
            .div_ceil(self.stride)
            .min(self.ow);
        let limit = self.w + self.pad - kj;
        let hi = if limit == 0 {
            0
        } else {
            ((limit - 1) / self.stride + 1).min(self.ow)
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.positions();
        let s = self.stride;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let Some(iy) = Self::src(oy, ki, s, self.pad, self.h) else {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        };
                        let src = &img[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        line[..lo].iter_mut().for_each(|v| *v = T::zero());
                        line[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if hi > lo {
                            let x0 = lo * s + kj - self.pad;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                            } else {
                                for (v, &x) in
                                    line[lo..hi].iter_mut().zip(src[x0..].iter().step_by(s))
                                {
                                    *v = x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.positions();
        let s = self.stride;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    if hi == lo {
                        continue;
                    }
                    let x0 = lo * s + kj - self.pad;
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, ki, s, self.pad, self.h) else {
                            continue;
                        };
                        let dst =
                            &mut img[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        let line = &src[oy * self.ow + lo..oy * self.ow + hi];
                        for (d, &v) in dst[x0..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.dims() != [channels] => Err(shape_err!(
            "bias {:?} for {} output channels",
            b.dims(),
            channels
        )),
        _ => Ok(()),
    }
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (xd, wd) = (x.dims(), w.dims());
        if xd.len() != 4 || wd.len() != 4 || xd[1] != wd[1] {
            return Err(shape_err!("conv2d: input {:?}, weight {:?}", xd, wd));
        }
        let (b, o) = (xd[0], wd[0]);
        check_bias(bias, o)?;
        let geom = Geom::new(xd[1], xd[2], xd[3], wd[2], wd[3], stride, pad)?;
        let (rows, p) = (geom.rows(), geom.positions());
        let in_len = geom.c * geom.h * geom.w;
        let mut out = vec![T::zero(); b * o * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        for bi in 0..b {
            let img = &x.data()[bi * in_len..(bi + 1) * in_len];
            let dst = &mut out[bi * o * p..(bi + 1) * o * p];
            if let Some(bs) = bias {
                for (oc, chunk) in dst.chunks_exact_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bs.data()[oc]);
                }
            }
            let src: &[T] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            gemm(o, rows, p, w.data(), false, src, false, dst, true);
        }
        let (sx, sw) = (x.clone(), w.clone());
        let mut inputs = vec![x, w];
        if let Some(bs) = bias {
            inputs.push(bs);
        }
        self.record(
            vec![b, o, geom.oh, geom.ow],
            out,
            &inputs,
            move |g, sink| {
                let mut cols = vec![T::zero(); rows * p];
                let want_x = sink.wants(0);
                if let Some(dw) = sink.slot(1) {
                    for bi in 0..b {
                        let img = &sx.data()[bi * in_len..(bi + 1) * in_len];
                        let src: &[T] = if geom.is_pointwise() {
                            img
                        } else {
                            geom.im2col(img, &mut cols);
                            &cols
                        };
                        gemm(o, p, rows, &g[bi * o * p..], false, src, true, dw, true);
                    }
                }
                if let Some(db) = sink.slot(2) {
                    for bi in 0..b {
                        for (oc, chunk) in
                            g[bi * o * p..(bi + 1) * o * p].chunks_exact(p).enumerate()
                        {
                            db[oc] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                }
                if want_x {
                    let dx = sink.slot(0).unwrap();
                    for bi in 0..b {
                        let dimg = &mut dx[bi * in_len..(bi + 1) * in_len];
                        if geom.is_pointwise() {
                            gemm(
                                rows,
                                o,
                                p,
                                sw.data(),
                                true,
                                &g[bi * o * p..],
                                false,
                                dimg,
                                true,
                            );
                        } else {
                            gemm(
                                rows,
                                o,
                                p,
                                sw.data(),
                                true,
                                &g[bi * o * p..],
                                false,
                                &mut cols,
                                false,
                            );
                            geom.col2im(&cols, dimg);
                        }
                    }
                }
            },
        )
    }

    /// Transposed convolution of `[B, Cin, H, W]` with `[Cin, Cout, kh, kw]`;
    /// output extent `(H - 1)·stride - 2·pad + kh`.
    pub fn conv_transpose2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (xd, wd) = (x.dims(), w.dims());
        if xd.len() != 4 || wd.len() != 4 || xd[1] != wd[0] || stride == 0 {
            return Err(shape_err!(
                "conv_transpose2d: input {:?}, weight {:?}",
                xd,
                wd
            ));
        }
        let (b, cin, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, kh, kw) = (wd[1], wd[2], wd[3]);
        check_bias(bias, cout)?;
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0);
        let ow = ((wi - 1) * stride + kw)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err!(
                "conv_transpose2d: non-positive output for {:?} / {:?} pad {}",
                xd,
                wd,
                pad
            ));
        };
        // The transposed op is the adjoint of a conv over the output image.
        let geom = Geom::new(cout, oh, ow, kh, kw, stride, pad)?;
        debug_assert_eq!((geom.oh, geom.ow), (h, wi));
        let (rows, p) = (geom.rows(), h * wi);
        let out_len = cout * oh * ow;
        let mut out = vec![T::zero(); b * out_len];
        let mut cols = vec![T::zero(); rows * p];
        for bi in 0..b {
            gemm(
                rows,
                cin,
                p,
                w.data(),
                true,
                &x.data()[bi * cin * p..],
                false,
                &mut cols,
                false,
            );
            let dst = &mut out[bi * out_len..(bi + 1) * out_len];
            geom.col2im(&cols, dst);
            if let Some(bs) = bias {
                for (oc, chunk) in dst.chunks_exact_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bs.data()[oc]);
                }
            }
        }
        let (sx, sw) = (x.clone(), w.clone());
        let mut inputs = vec![x, w];
        if let Some(bs) = bias {
            inputs.push(bs);
        }
        self.record(vec![b, cout, oh, ow], out, &inputs, move |g, sink| {
            let mut cols = vec![T::zero(); rows * p];
            let (want_x, want_w) = (sink.wants(0), sink.wants(1));
            for bi in 0..b {
                if !(want_x || want_w) {
                    break;
                }
                geom.im2col(&g[bi * out_len..(bi + 1) * out_len], &mut cols);
                if let Some(dx) = sink.slot(0) {
                    gemm(
                        cin,
                        rows,
                        p,
                        sw.data(),
                        false,
                        &cols,
                        false,
                        &mut dx[bi * cin * p..(bi + 1) * cin * p],
                        true,
                    );
                }
                if let Some(dw) = sink.slot(1) {
                    gemm(
                        cin,
                        p,
                        rows,
                        &sx.data()[bi * cin * p..],
                        false,
                        &cols,
                        true,
                        dw,
                        true,
                    );
                }
            }
            if let Some(db) = sink.slot(2) {
                for bi in 0..b {
                    for (oc, chunk) in g[bi * out_len..(bi + 1) * out_len]
                        .chunks_exact(oh * ow)
                        .enumerate()
                    {
                        db[oc] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            }
        })
    }

    /// Max pooling with implicit `-inf` padding; the gradient goes to the
    /// first maximal element of each window.
    pub fn max_pool2d(
        &self,
        x: &Tensor<T>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let xd = x.dims();
        if xd.len() != 4 || k == 0 || pad >= k {
            return Err(shape_err!(
                "max_pool2d: input {:?}, kernel {} pad {}",
                xd,
                k,
                pad
            ));
        }
        let geom = Geom::new(xd[1], xd[2], xd[3], k, k, stride, pad)?;
        let (b, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = (geom.oh, geom.ow);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        let xs = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ki in 0..k {
                        let Some(iy) = Geom::src(oy, ki, stride, pad, h) else {
                            continue;
                        };
                        for kj in 0..k {
                            let Some(ix) = Geom::src(ox, kj, stride, pad, w) else {
                                continue;
                            };
                            let i = base + iy * w + ix;
                            if best_i == usize::MAX || xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
        self.record(vec![b, c, oh, ow], out, &[x], move |g, sink| {
            if let Some(dx) = sink.slot(0) {
                for (&i, &v) in arg.iter().zip(g) {
                    dx[i] += v;
                }
            }
        })
    }
}
