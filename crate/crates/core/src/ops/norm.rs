use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Rows of `n` elements normalized independently; element `j` of row `r`
/// uses affine channel `(r % groups) * per_group + j / chan_inner`.
#[derive(Clone, Copy)]
struct NormPlan {
    rows: usize,
    n: usize,
    groups: usize,
    per_group: usize,
    chan_inner: usize,
}

impl NormPlan {
    /// Affine channel of the first element of row `r`.
    #[inline]
    fn chan0(&self, r: usize) -> usize {
        (r % self.groups) * self.per_group
    }
}

impl<T: Real> Tape<T> {
    fn normalize(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
        plan: NormPlan,
    ) -> Result<Tensor<T>> {
        let xs = x.data();
        let n = plan.n;
        let nt = T::lit(n as f64);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); plan.rows];
        for r in 0..plan.rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nt;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let (gs, bs) = (gamma.data(), beta.data());
        let ci = plan.chan_inner;
        let mut out: Vec<T> = Vec::with_capacity(xs.len());
        for r in 0..plan.rows {
            let c0 = plan.chan0(r);
            for (k, seg) in xhat[r * n..(r + 1) * n].chunks_exact(ci).enumerate() {
                let (gc, bc) = (gs[c0 + k], bs[c0 + k]);
                out.extend(seg.iter().map(|&h| h * gc + bc));
            }
        }
        let sg = gamma.clone();
        self.record(x.dims().to_vec(), out, &[x, gamma, beta], move |g, sink| {
            let gs = sg.data();
            if let Some(dg) = sink.slot(1) {
                for r in 0..plan.rows {
                    let c0 = plan.chan0(r);
                    let segs = g[r * n..(r + 1) * n]
                        .chunks_exact(ci)
                        .zip(xhat[r * n..(r + 1) * n].chunks_exact(ci));
                    for (k, (gseg, hseg)) in segs.enumerate() {
                        dg[c0 + k] += gseg
                            .iter()
                            .zip(hseg)
                            .fold(T::zero(), |a, (&gv, &h)| a + gv * h);
                    }
                }
            }
            if let Some(db) = sink.slot(2) {
                for r in 0..plan.rows {
                    let c0 = plan.chan0(r);
                    for (k, gseg) in g[r * n..(r + 1) * n].chunks_exact(ci).enumerate() {
                        db[c0 + k] += gseg.iter().fold(T::zero(), |a, &gv| a + gv);
                    }
                }
            }
            if let Some(dx) = sink.slot(0) {
                let mut dxhat = vec![T::zero(); n];
                for r in 0..plan.rows {
                    let c0 = plan.chan0(r);
                    let gr = &g[r * n..(r + 1) * n];
                    for (k, (dseg, gseg)) in dxhat
                        .chunks_exact_mut(ci)
                        .zip(gr.chunks_exact(ci))
                        .enumerate()
                    {
                        let gc = gs[c0 + k];
                        for (d, &gv) in dseg.iter_mut().zip(gseg) {
                            *d = gv * gc;
                        }
                    }
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for (&v, &h) in dxhat.iter().zip(&xhat[r * n..(r + 1) * n]) {
                        s1 += v;
                        s2 += v * h;
                    }
                    let k = inv_std[r] / nt;
                    let dst = &mut dx[r * n..(r + 1) * n];
                    for ((d, &v), &h) in dst.iter_mut().zip(&dxhat).zip(&xhat[r * n..(r + 1) * n]) {
                        *d += k * (nt * v - s1 - h * s2);
                    }
                }
            }
        })
    }

    /// Normalizes over the last axis, then applies per-feature `gamma`/`beta`.
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let d = *x.dims().last().unwrap();
        if gamma.dims() != [d] || beta.dims() != [d] {
            return Err(shape_err!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                x.dims(),
                gamma.dims(),
                beta.dims()
            ));
        }
        let plan = NormPlan {
            rows: x.numel() / d,
            n: d,
            groups: 1,
            per_group: d,
            chan_inner: 1,
        };
        self.normalize(x, gamma, beta, T::lit(eps), plan)
    }

    /// Group normalization of `[B, C, H, W]` with per-channel affine.
    /// Statistics never mix samples of the batch.
    pub fn group_norm(
        &self,
        x: &Tensor<T>,
        groups: usize,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let d = x.dims();
        if d.len() != 4 || groups == 0 || !d[1].is_multiple_of(groups) {
            return Err(shape_err!(
                "group_norm: input {:?} with {} groups",
                d,
                groups
            ));
        }
        let (b, c, hw) = (d[0], d[1], d[2] * d[3]);
        if gamma.dims() != [c] || beta.dims() != [c] {
            return Err(shape_err!(
                "group_norm: affine {:?}/{:?} for {} channels",
                gamma.dims(),
                beta.dims(),
                c
            ));
        }
        let per_group = c / groups;
        let plan = NormPlan {
            rows: b * groups,
            n: per_group * hw,
            groups,
            per_group,
            chan_inner: hw,
        };
        self.normalize(x, gamma, beta, T::lit(eps), plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_row_maps_to_beta() {
        let t = Tape::<f64>::inference();
        let x = Tensor::full(&[2, 4], 3.5);
        let g = Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = t.layer_norm(&x, &g, &b, 1e-6).unwrap();
        assert_eq!(y.to_vec(), vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn normalized_row_is_a_fixed_point() {
        let t = Tape::<f64>::inference();
        let x = Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let y = t
            .layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0)
            .unwrap();
        assert_eq!(y.to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn group_norm_stats_are_per_sample() {
        let t = Tape::<f64>::inference();
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| {
            if i < 8 {
                i as f64
            } else {
                100.0 * i as f64
            }
        });
        let y = t
            .group_norm(&x, 1, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0)
            .unwrap();
        for b in 0..2 {
            let s: f64 = y.data()[b * 8..(b + 1) * 8].iter().sum();
            let ss: f64 = y.data()[b * 8..(b + 1) * 8].iter().map(|v| v * v).sum();
            assert!(s.abs() < 1e-12);
            assert!((ss / 8.0 - 1.0).abs() < 1e-12);
        }
    }
}
