use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One corner of a bilinear stencil.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    /// Flat `y * w + x` index, `None` when the corner lies outside the grid.
    pub index: Option<usize>,
    pub weight: T,
    /// Derivative of `weight` with respect to the pixel-space x coordinate.
    pub d_px: T,
    pub d_py: T,
}

/// Bilinear stencil for normalized `(x, y)` on an `h × w` grid whose pixel
/// centres sit at `((j + 0.5) / w, (i + 0.5) / h)`. Corners outside the grid
/// read as zero.
pub fn bilinear_taps<T: Real>(x: T, y: T, h: usize, w: usize) -> [Tap<T>; 4] {
    let half = T::lit(0.5);
    let px = x * T::lit(w as f64) - half;
    let py = y * T::lit(h as f64) - half;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let one = T::one();
    let (x0, y0) = (
        x0.to_i64().unwrap_or(i64::MIN / 2),
        y0.to_i64().unwrap_or(i64::MIN / 2),
    );
    let at = |dx: i64, dy: i64| {
        let (xi, yi) = (x0 + dx, y0 + dy);
        (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h)
            .then(|| yi as usize * w + xi as usize)
    };
    [
        Tap {
            index: at(0, 0),
            weight: (one - fx) * (one - fy),
            d_px: -(one - fy),
            d_py: -(one - fx),
        },
        Tap {
            index: at(1, 0),
            weight: fx * (one - fy),
            d_px: one - fy,
            d_py: -fx,
        },
        Tap {
            index: at(0, 1),
            weight: (one - fx) * fy,
            d_px: -fy,
            d_py: one - fx,
        },
        Tap {
            index: at(1, 1),
            weight: fx * fy,
            d_px: fy,
            d_py: fx,
        },
    ]
}

/// Source interpolation for `dst` when resizing `src_len → dst_len` with
/// half-pixel centres: `(lower index, upper index, upper weight)`.
pub fn resize_source(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = libm::fmax((dst as f64 + 0.5) * scale - 0.5, 0.0);
    let i0 = (libm::floor(s) as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

impl<T: Real> Tape<T> {
    /// Samples `value [B, C, H, W]` at normalized `points [B, P, 2]` (x, y)
    /// with zero padding; returns `[B, P, C]`.
    pub fn bilinear_sample(&self, value: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
        let (vd, pd) = (value.dims(), points.dims());
        if vd.len() != 4 || pd.len() != 3 || pd[2] != 2 || pd[0] != vd[0] {
            return Err(shape_err!(
                "bilinear_sample: value {:?}, points {:?}",
                vd,
                pd
            ));
        }
        let (b, c, h, w) = (vd[0], vd[1], vd[2], vd[3]);
        let np = pd[1];
        let hw = h * w;
        let vs = value.data();
        let ps = points.data();
        let mut out = vec![T::zero(); b * np * c];
        for bi in 0..b {
            for p in 0..np {
                let pi = (bi * np + p) * 2;
                let taps = bilinear_taps(ps[pi], ps[pi + 1], h, w);
                let dst = &mut out[(bi * np + p) * c..(bi * np + p + 1) * c];
                for tap in taps.iter() {
                    let Some(idx) = tap.index else { continue };
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d += tap.weight * vs[(bi * c + ch) * hw + idx];
                    }
                }
            }
        }
        let (sv, sp) = (value.clone(), points.clone());
        self.record(vec![b, np, c], out, &[value, points], move |g, sink| {
            let (vs, ps) = (sv.data(), sp.data());
            let (wf, hf) = (T::lit(w as f64), T::lit(h as f64));
            for bi in 0..b {
                for p in 0..np {
                    let pi = (bi * np + p) * 2;
                    let taps = bilinear_taps(ps[pi], ps[pi + 1], h, w);
                    let gp = &g[(bi * np + p) * c..(bi * np + p + 1) * c];
                    if let Some(dv) = sink.slot(0) {
                        for tap in taps.iter() {
                            let Some(idx) = tap.index else { continue };
                            for (ch, &gv) in gp.iter().enumerate() {
                                dv[(bi * c + ch) * hw + idx] += tap.weight * gv;
                            }
                        }
                    }
                    if let Some(dp) = sink.slot(1) {
                        let (mut gx, mut gy) = (T::zero(), T::zero());
                        for tap in taps.iter() {
                            let Some(idx) = tap.index else { continue };
                            for (ch, &gv) in gp.iter().enumerate() {
                                let v = vs[(bi * c + ch) * hw + idx] * gv;
                                gx += tap.d_px * v;
                                gy += tap.d_py * v;
                            }
                        }
                        dp[pi] += gx * wf;
                        dp[pi + 1] += gy * hf;
                    }
                }
            }
        })
    }

    /// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]` with half-pixel
    /// centres and edge clamping.
    pub fn resize_bilinear(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let d = x.dims();
        if d.len() != 4 || oh == 0 || ow == 0 {
            return Err(shape_err!(
                "resize_bilinear: input {:?} to {}x{}",
                d,
                oh,
                ow
            ));
        }
        let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
        if (h, w) == (oh, ow) && !self.needs_grad(&[x]) {
            return Ok(x.detach());
        }
        let ys: Vec<(usize, usize, T)> = (0..oh)
            .map(|i| resize_source(i, h, oh))
            .map(|(a, b, l)| (a, b, T::lit(l)))
            .collect();
        let xs: Vec<(usize, usize, T)> = (0..ow)
            .map(|j| resize_source(j, w, ow))
            .map(|(a, b, l)| (a, b, T::lit(l)))
            .collect();
        let src = x.data();
        let one = T::one();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let img = &src[pl * h * w..(pl + 1) * h * w];
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let top = img[y0 * w + x0] * (one - lx) + img[y0 * w + x1] * lx;
                    let bot = img[y1 * w + x0] * (one - lx) + img[y1 * w + x1] * lx;
                    out.push(top * (one - ly) + bot * ly);
                }
            }
        }
        self.record(vec![d[0], d[1], oh, ow], out, &[x], move |g, sink| {
            if let Some(dx) = sink.slot(0) {
                for pl in 0..planes {
                    let dimg = &mut dx[pl * h * w..(pl + 1) * h * w];
                    let gp = &g[pl * oh * ow..(pl + 1) * oh * ow];
                    for (i, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (j, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let v = gp[i * ow + j];
                            dimg[y0 * w + x0] += v * (one - ly) * (one - lx);
                            dimg[y0 * w + x1] += v * (one - ly) * lx;
                            dimg[y1 * w + x0] += v * ly * (one - lx);
                            dimg[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
            }
        })
    }
}
