//! Multi-scale deformable cross-attention and the dense global alternative.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::dot_product_attention;
use crate::config::{AttentionKind, ModelConfig};
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, Init, Linear};
use crate::ops::bilinear_taps;
use crate::real::Real;
use crate::spm::ScaleLayout;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Pixel-centre reference points `[h·w, 2]` (x, y) of one grid, row-major.
pub fn reference_points<T: Real>(grid: (usize, usize)) -> Tensor<T> {
    let (h, w) = grid;
    Tensor::from_fn(&[h * w, 2], |i| {
        let (cell, axis) = (i / 2, i % 2);
        if axis == 0 {
            T::lit(((cell % w) as f64 + 0.5) / w as f64)
        } else {
            T::lit(((cell / w) as f64 + 0.5) / h as f64)
        }
    })
}

/// Reference points of every level of `layout`, concatenated in layout order.
pub fn layout_reference_points<T: Real>(layout: &ScaleLayout) -> Tensor<T> {
    let mut data = Vec::with_capacity(layout.total * 2);
    for &g in &layout.levels {
        data.extend_from_slice(reference_points::<T>(g).data());
    }
    Tensor::from_parts(vec![layout.total, 2], data)
}

/// Shape bookkeeping of one deformable-attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformShape {
    pub batch: usize,
    pub queries: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub head_dim: usize,
}

impl DeformShape {
    fn of(
        value: &Tensor<impl Real>,
        layout: &ScaleLayout,
        offsets: &Tensor<impl Real>,
        heads: usize,
    ) -> Result<Self> {
        let (vd, od) = (value.dims(), offsets.dims());
        if vd.len() != 3 || vd[1] != layout.total || heads == 0 || vd[2] % heads != 0 {
            return Err(shape_err!(
                "value {:?} does not match layout total {} / {heads} heads",
                vd,
                layout.total
            ));
        }
        if od.len() != 6 || od[0] != vd[0] || od[2] != heads || od[3] != layout.len() || od[5] != 2
        {
            return Err(shape_err!("offsets {:?} do not match value {:?}", od, vd));
        }
        Ok(Self {
            batch: vd[0],
            queries: od[1],
            heads,
            levels: layout.len(),
            points: od[4],
            head_dim: vd[2] / heads,
        })
    }
}

impl<T: Real> Tape<T> {
    /// Core of deformable attention on already projected tensors.
    ///
    /// `value [B, Tv, M·dh]` laid out by `layout`, `refs [Tq, 2]`,
    /// `offsets [B, Tq, M, Lv, K, 2]` in grid cells of the sampled level,
    /// `attn [B, Tq, M, Lv, K]` normalized weights. Returns `[B, Tq, M·dh]`
    /// and the number of bilinear samples taken.
    pub fn ms_deform_core(
        &self,
        value: &Tensor<T>,
        layout: &ScaleLayout,
        refs: &Tensor<T>,
        offsets: &Tensor<T>,
        attn: &Tensor<T>,
        heads: usize,
    ) -> Result<(Tensor<T>, usize)> {
        let s = DeformShape::of(value, layout, offsets, heads)?;
        if refs.dims() != [s.queries, 2] {
            return Err(shape_err!(
                "refs {:?} do not match {} queries",
                refs.dims(),
                s.queries
            ));
        }
        if attn.dims() != [s.batch, s.queries, s.heads, s.levels, s.points] {
            return Err(shape_err!(
                "attention weights {:?} do not match offsets {:?}",
                attn.dims(),
                offsets.dims()
            ));
        }
        let (tv, c, dh) = (layout.total, s.heads * s.head_dim, s.head_dim);
        let mut out = vec![T::zero(); s.batch * s.queries * c];
        let mut samples = 0usize;
        let mut acc = vec![T::zero(); dh];
        {
            let (vs, rs, os, ws) = (value.data(), refs.data(), offsets.data(), attn.data());
            for_each_sample(&s, layout, rs, os, |b, q, m, l, si, x, y| {
                let (h, w) = layout.levels[l];
                let taps = bilinear_taps(x, y, h, w);
                acc.iter_mut().for_each(|a| *a = T::zero());
                for tap in &taps {
                    let Some(idx) = tap.index else { continue };
                    let row = &vs[(b * tv + layout.starts[l] + idx) * c + m * dh..][..dh];
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += tap.weight * v;
                    }
                }
                let a = ws[si];
                let dst = &mut out[(b * s.queries + q) * c + m * dh..][..dh];
                for (d, &v) in dst.iter_mut().zip(&acc) {
                    *d += a * v;
                }
                samples += 1;
            });
        }
        let (sv, sr, so, sa, lay) = (
            value.clone(),
            refs.clone(),
            offsets.clone(),
            attn.clone(),
            layout.clone(),
        );
        let t = self.record(
            vec![s.batch, s.queries, c],
            out,
            &[value, offsets, attn],
            move |g, sink| {
                let (vs, rs, os, ws) = (sv.data(), sr.data(), so.data(), sa.data());
                let (want_v, want_o, want_a) = (sink.wants(0), sink.wants(1), sink.wants(2));
                let mut dv = want_v.then(|| vec![T::zero(); vs.len()]);
                let mut doff = want_o.then(|| vec![T::zero(); os.len()]);
                let mut da = want_a.then(|| vec![T::zero(); ws.len()]);
                for_each_sample(&s, &lay, rs, os, |b, q, m, l, si, x, y| {
                    let (h, w) = lay.levels[l];
                    let taps = bilinear_taps(x, y, h, w);
                    let gq = &g[(b * s.queries + q) * c + m * dh..][..dh];
                    let a = ws[si];
                    let (mut gs, mut gx, mut gy) = (T::zero(), T::zero(), T::zero());
                    for tap in &taps {
                        let Some(idx) = tap.index else { continue };
                        let base = (b * tv + lay.starts[l] + idx) * c + m * dh;
                        let row = &vs[base..][..dh];
                        let gv: T = row
                            .iter()
                            .zip(gq)
                            .fold(T::zero(), |acc, (&v, &g)| acc + v * g);
                        gs += tap.weight * gv;
                        gx += tap.d_px * gv;
                        gy += tap.d_py * gv;
                        if let Some(dv) = dv.as_mut() {
                            let wa = tap.weight * a;
                            for (d, &g) in dv[base..][..dh].iter_mut().zip(gq) {
                                *d += wa * g;
                            }
                        }
                    }
                    if let Some(da) = da.as_mut() {
                        da[si] += gs;
                    }
                    // d(px)/d(offset) = w · (1/w) = 1, likewise for y
                    if let Some(doff) = doff.as_mut() {
                        doff[si * 2] += a * gx;
                        doff[si * 2 + 1] += a * gy;
                    }
                });
                if let Some(d) = dv {
                    sink.add_owned(0, d);
                }
                if let Some(d) = doff {
                    sink.add_owned(1, d);
                }
                if let Some(d) = da {
                    sink.add_owned(2, d);
                }
            },
        )?;
        Ok((t, samples))
    }
}

/// Visits every (batch, query, head, level, point) with its flat sample
/// index and normalized sampling location.
fn for_each_sample<T: Real>(
    s: &DeformShape,
    layout: &ScaleLayout,
    refs: &[T],
    offsets: &[T],
    mut f: impl FnMut(usize, usize, usize, usize, usize, T, T),
) {
    let mut si = 0;
    for b in 0..s.batch {
        for q in 0..s.queries {
            let (rx, ry) = (refs[q * 2], refs[q * 2 + 1]);
            for m in 0..s.heads {
                for l in 0..s.levels {
                    let (h, w) = layout.levels[l];
                    let (wf, hf) = (T::lit(w as f64), T::lit(h as f64));
                    for _ in 0..s.points {
                        let x = rx + offsets[si * 2] / wf;
                        let y = ry + offsets[si * 2 + 1] / hf;
                        f(b, q, m, l, si, x, y);
                        si += 1;
                    }
                }
            }
        }
    }
}

/// Learned projections of one deformable cross-attention.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub value_proj: Linear,
    pub output_proj: Linear,
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

/// Sampling offsets `[B, Tq, M, Lv, K, 2]` and normalized weights `[B, Tq, M, Lv, K]`.
pub struct SamplingPlan<T> {
    pub offsets: Tensor<T>,
    pub weights: Tensor<T>,
}

impl DeformAttn {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        dim: usize,
        value_dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        zero_output: bool,
    ) -> Self {
        let n = heads * levels * points;
        let sampling_offsets = {
            let mut s = init.scope("sampling_offsets");
            let weight = s.tensor("weight", Tensor::zeros(&[dim, n * 2]), true);
            let bias = s.tensor(
                "bias",
                Tensor::from_fn(&[n * 2], |i| T::lit(ring_offset(i, points))),
                false,
            );
            Linear {
                weight,
                bias: Some(bias),
                in_dim: dim,
                out_dim: n * 2,
            }
        };
        let attention_weights = Linear::zeroed(&mut init.scope("attention_weights"), dim, n);
        let value_proj = Linear::xavier(&mut init.scope("value_proj"), dim, value_dim);
        let output_proj = if zero_output {
            Linear::zeroed(&mut init.scope("output_proj"), value_dim, dim)
        } else {
            Linear::xavier(&mut init.scope("output_proj"), value_dim, dim)
        };
        Self {
            value_proj,
            output_proj,
            sampling_offsets,
            attention_weights,
            heads,
            levels,
            points,
        }
    }

    pub fn plan<T: Real>(&self, ctx: &Ctx<'_, T>, query: &Tensor<T>) -> Result<SamplingPlan<T>> {
        let t = ctx.tape;
        let (b, tq) = (query.dims()[0], query.dims()[1]);
        let (m, l, k) = (self.heads, self.levels, self.points);
        let off = self.sampling_offsets.forward(ctx, query)?;
        let offsets = t.reshape(&off, &[b, tq, m, l, k, 2])?;
        let logits = self.attention_weights.forward(ctx, query)?;
        let logits = t.reshape(&logits, &[b, tq, m, l * k])?;
        let weights = t.reshape(&t.softmax(&logits, 3)?, &[b, tq, m, l, k])?;
        Ok(SamplingPlan { offsets, weights })
    }

    /// `query [B, Tq, D]` with `refs [Tq, 2]` attends to `value [B, Tv, D]`.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        query: &Tensor<T>,
        refs: &Tensor<T>,
        value: &Tensor<T>,
        layout: &ScaleLayout,
    ) -> Result<Tensor<T>> {
        if layout.len() != self.levels {
            return Err(shape_err!(
                "layout has {} levels, attention expects {}",
                layout.len(),
                self.levels
            ));
        }
        let plan = self.plan(ctx, query)?;
        let v = self.value_proj.forward(ctx, value)?;
        let (o, _) =
            ctx.tape
                .ms_deform_core(&v, layout, refs, &plan.offsets, &plan.weights, self.heads)?;
        self.output_proj.forward(ctx, &o)
    }
}

/// Bias of the offset head: point k of every head and level starts on a
/// ring of radius k+1 at angle 2πk/K.
fn ring_offset(i: usize, points: usize) -> f64 {
    let (k, axis) = ((i / 2) % points, i % 2);
    let theta = 2.0 * core::f64::consts::PI * k as f64 / points as f64;
    let r = (k + 1) as f64;
    if axis == 0 {
        r * libm::cos(theta)
    } else {
        r * libm::sin(theta)
    }
}

/// Dense multi-head cross-attention over every value token.
#[derive(Clone, Debug)]
pub struct GlobalAttn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl GlobalAttn {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        dim: usize,
        inner: usize,
        heads: usize,
        zero_output: bool,
    ) -> Self {
        let o = if zero_output {
            Linear::zeroed(&mut init.scope("o"), inner, dim)
        } else {
            Linear::xavier(&mut init.scope("o"), inner, dim)
        };
        Self {
            q: Linear::xavier(&mut init.scope("q"), dim, inner),
            k: Linear::xavier(&mut init.scope("k"), dim, inner),
            v: Linear::xavier(&mut init.scope("v"), dim, inner),
            o,
            heads,
        }
    }

    /// Output `[B, Tq, D]` and attention probabilities `[B, M, Tq, Tkv]`.
    pub fn attend<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        query: &Tensor<T>,
        key_value: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, key_value)?;
        let v = self.v.forward(ctx, key_value)?;
        let (a, p) = dot_product_attention(ctx.tape, &q, &k, &v, self.heads)?;
        Ok((self.o.forward(ctx, &a)?, p))
    }
}

/// The attention used inside injectors and extractors.
#[derive(Clone, Debug)]
pub enum CrossAttention {
    Deformable(DeformAttn),
    Global(GlobalAttn),
}

impl CrossAttention {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        cfg: &ModelConfig,
        levels: usize,
        zero_output: bool,
    ) -> Self {
        let (d, dv, m) = (cfg.embed_dim, cfg.value_dim(), cfg.adapter_heads);
        match cfg.attention {
            AttentionKind::Deformable => Self::Deformable(DeformAttn::new(
                init,
                d,
                dv,
                m,
                levels,
                cfg.points,
                zero_output,
            )),
            AttentionKind::Global => Self::Global(GlobalAttn::new(init, d, dv, m, zero_output)),
        }
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        query: &Tensor<T>,
        refs: &Tensor<T>,
        value: &Tensor<T>,
        layout: &ScaleLayout,
    ) -> Result<Tensor<T>> {
        match self {
            Self::Deformable(a) => a.forward(ctx, query, refs, value, layout),
            Self::Global(a) => {
                if value.dims().get(1) != Some(&layout.total) {
                    return Err(shape_err!(
                        "value {:?} does not match layout total {}",
                        value.dims(),
                        layout.total
                    ));
                }
                Ok(a.attend(ctx, query, value)?.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_grids() {
        let r = reference_points::<f64>((1, 1));
        assert_eq!(r.to_vec(), [0.5, 0.5]);
        let r = reference_points::<f64>((2, 2));
        assert_eq!(r.to_vec(), [0.25, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.75]);
    }

    #[test]
    fn ring_radius_grows_with_point_index() {
        for k in 0..4 {
            let (x, y) = (ring_offset(2 * k, 4), ring_offset(2 * k + 1, 4));
            assert!((libm::sqrt(x * x + y * y) - (k + 1) as f64).abs() < 1e-12);
        }
    }
}
