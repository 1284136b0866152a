//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls the library's kernels; every oracle is a literal loop.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use vit_adapter_core::nn::{component_rng, ParamStore};
use vit_adapter_core::spm::ScaleLayout;
use vit_adapter_core::Tensor;

pub fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = component_rng(seed, "integration-test");
    Tensor::from_fn(dims, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = component_rng(seed, "integration-test-uniform");
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Adds N(0, scale²) noise to every parameter, so zero-initialized gates and
/// projections stop hiding gradient paths.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = component_rng(seed, "perturb");
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let v = store.value(id).clone();
        let noisy = Tensor::from_fn(v.dims(), |i| {
            v.data()[i] + scale * rng.sample::<f64, _>(StandardNormal)
        });
        store.set(id, noisy).unwrap();
    }
}

/// Value of pixel (i, j) of an h×w map, zero outside.
fn pixel(map: impl Fn(usize) -> f64, h: usize, w: usize, i: i64, j: i64) -> f64 {
    if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
        0.0
    } else {
        map(i as usize * w + j as usize)
    }
}

/// Bilinear read of a map with pixel centres at ((j+0.5)/w, (i+0.5)/h).
pub fn bilinear(map: impl Fn(usize) -> f64 + Copy, h: usize, w: usize, x: f64, y: f64) -> f64 {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    (1.0 - fx) * (1.0 - fy) * pixel(map, h, w, y0, x0)
        + fx * (1.0 - fy) * pixel(map, h, w, y0, x0 + 1)
        + (1.0 - fx) * fy * pixel(map, h, w, y0 + 1, x0)
        + fx * fy * pixel(map, h, w, y0 + 1, x0 + 1)
}

/// Literal deformable-attention sum over heads, levels and points.
///
/// `value [B, Tv, M·dh]`, `refs [Tq, 2]`, `offsets [B, Tq, M, L, K, 2]`,
/// `attn [B, Tq, M, L, K]`; returns `[B, Tq, M·dh]` flattened.
pub fn deform_oracle(
    value: &Tensor<f64>,
    layout: &ScaleLayout,
    refs: &Tensor<f64>,
    offsets: &Tensor<f64>,
    attn: &Tensor<f64>,
    heads: usize,
) -> Vec<f64> {
    let od = offsets.dims();
    let (b, tq, m, nl, k) = (od[0], od[1], od[2], od[3], od[4]);
    assert_eq!(m, heads);
    let c = value.dims()[2];
    let dh = c / heads;
    let mut out = vec![0.0; b * tq * c];
    for bi in 0..b {
        for q in 0..tq {
            for hd in 0..m {
                for l in 0..nl {
                    let (h, w) = layout.levels[l];
                    for p in 0..k {
                        let ox = offsets.at(&[bi, q, hd, l, p, 0]);
                        let oy = offsets.at(&[bi, q, hd, l, p, 1]);
                        let x = refs.at(&[q, 0]) + ox / w as f64;
                        let y = refs.at(&[q, 1]) + oy / h as f64;
                        let a = attn.at(&[bi, q, hd, l, p]);
                        for ch in 0..dh {
                            let map =
                                |pos: usize| value.at(&[bi, layout.starts[l] + pos, hd * dh + ch]);
                            out[(bi * tq + q) * c + hd * dh + ch] += a * bilinear(map, h, w, x, y);
                        }
                    }
                }
            }
        }
    }
    out
}

/// softmax(Q_h K_hᵀ / √dh) V_h per head on already projected `[B, T, M·dh]`.
pub fn attention_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
) -> Vec<f64> {
    let (b, tq, c) = (q.dims()[0], q.dims()[1], q.dims()[2]);
    let tk = k.dims()[1];
    let dh = c / heads;
    let mut out = vec![0.0; b * tq * c];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..tq {
                let scores: Vec<f64> = (0..tk)
                    .map(|j| {
                        (0..dh)
                            .map(|d| q.at(&[bi, i, h * dh + d]) * k.at(&[bi, j, h * dh + d]))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dh {
                    out[(bi * tq + i) * c + h * dh + d] =
                        (0..tk).map(|j| e[j] / z * v.at(&[bi, j, h * dh + d])).sum();
                }
            }
        }
    }
    out
}

/// `x [rows, in] · w [in, out] + b`, as nested loops.
pub fn linear_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (din, dout) = (w.dims()[0], w.dims()[1]);
    let rows = x.numel() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut s = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                s += x.data()[r * din + i] * w.data()[i * dout + o];
            }
            out[r * dout + o] = s;
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = dout;
    Tensor::new(&dims, out).unwrap()
}

/// Half-pixel bilinear resize with edge clamping, written from scratch.
pub fn resize_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let d = x.dims();
    let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
    let src = |i: usize, n: usize, m: usize| {
        let s = ((i as f64 + 0.5) * n as f64 / m as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for i in 0..oh {
            let (y0, y1, ly) = src(i, h, oh);
            for j in 0..ow {
                let (x0, x1, lx) = src(j, w, ow);
                let g = |y: usize, xx: usize| x.data()[(p * h + y) * w + xx];
                let top = g(y0, x0) * (1.0 - lx) + g(y0, x1) * lx;
                let bot = g(y1, x0) * (1.0 - lx) + g(y1, x1) * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Tensor::new(&[d[0], d[1], oh, ow], out).unwrap()
}
