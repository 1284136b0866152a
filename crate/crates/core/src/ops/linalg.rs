use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;

/// `c (+)= op(a)·op(b)` with `op(a)` of size `m×k` and `op(b)` of size `k×n`.
///
/// `ta` means `a` is stored `k×m`; `tb` means `b` is stored `n×k`. Every
/// output element is accumulated in increasing `k` order starting from its
/// initial value (zero unless `accumulate`), so results do not depend on
/// blocking and match a plain triple loop exactly.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too short"
    );
    let c = &mut c[..m * n];
    if !accumulate {
        c.iter_mut().for_each(|x| *x = T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a = Strided {
        data: a,
        rs: if ta { 1 } else { k },
        cs: if ta { m } else { 1 },
    };
    let b = Strided {
        data: b,
        rs: if tb { 1 } else { n },
        cs: if tb { k } else { 1 },
    };
    gemm_nn(m, k, n, a, b, c);
}

/// Matrix view with element `(i, j)` at `data[i·rs + j·cs]`.
#[derive(Clone, Copy)]
struct Strided<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<T: Copy> Strided<'_, T> {
    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
fn gemm_nn<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Strided<'_, T>,
    b: Strided<'_, T>,
    c: &mut [T],
) {
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2. The kernel is plain mul/add, so the
        // wider registers change throughput only, never results.
        unsafe { gemm_nn_avx2(m, k, n, a, b, c) }
    } else {
        gemm_kernel(m, k, n, a, b, c)
    }
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nn_avx2<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Strided<'_, T>,
    b: Strided<'_, T>,
    c: &mut [T],
) {
    gemm_kernel(m, k, n, a, b, c)
}

#[cfg(not(all(feature = "std", target_arch = "x86_64")))]
fn gemm_nn<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Strided<'_, T>,
    b: Strided<'_, T>,
    c: &mut [T],
) {
    gemm_kernel(m, k, n, a, b, c)
}

#[inline(always)]
fn gemm_kernel<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Strided<'_, T>,
    b: Strided<'_, T>,
    c: &mut [T],
) {
    let mut apack = vec![T::zero(); (m - m % MR) * KC.min(k)];
    let mut panel = vec![T::zero(); KC.min(k) * NR];
    // Blocks of k run in increasing order and each partial sum is carried
    // through c, so every element still sees its products in k order.
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        let a = Strided {
            data: &a.data[k0 * a.cs..],
            ..a
        };
        let b = Strided {
            data: &b.data[k0 * b.rs..],
            ..b
        };
        gemm_block(
            m,
            kc,
            n,
            a,
            b,
            c,
            &mut apack[..(m - m % MR) * kc],
            &mut panel[..kc * NR],
        );
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn gemm_block<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Strided<'_, T>,
    b: Strided<'_, T>,
    c: &mut [T],
    apack: &mut [T],
    panel: &mut [T],
) {
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    // a as k×MR blocks, b one k×NR panel at a time: the inner loop only
    // touches sequential memory whatever the operand layout.
    for (blk, dst) in apack.chunks_exact_mut(k * MR).enumerate() {
        for p in 0..k {
            for r in 0..MR {
                dst[p * MR + r] = a.at(blk * MR + r, p);
            }
        }
    }
    for j0 in (0..n_full).step_by(NR) {
        if b.cs == 1 {
            for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
                dst.copy_from_slice(&b.data[p * b.rs + j0..p * b.rs + j0 + NR]);
            }
        } else {
            for jj in 0..NR {
                for p in 0..k {
                    panel[p * NR + jj] = b.at(p, j0 + jj);
                }
            }
        }
        for (blk, ablk) in apack.chunks_exact(k * MR).enumerate() {
            let i0 = blk * MR;
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for (ap, bp) in ablk.chunks_exact(MR).zip(panel.chunks_exact(NR)) {
                let bp: &[T; NR] = bp.try_into().unwrap();
                for (row, &av) in acc.iter_mut().zip(ap) {
                    for (x, &bv) in row.iter_mut().zip(bp) {
                        *x += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for i in m_full..m {
            let mut acc: [T; NR] = c[i * n + j0..i * n + j0 + NR].try_into().unwrap();
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                let av = a.at(i, p);
                for (x, &bv) in acc.iter_mut().zip(bp) {
                    *x += av * bv;
                }
            }
            c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
        }
    }
    for i in 0..m {
        for j in n_full..n {
            let mut acc = c[i * n + j];
            for p in 0..k {
                acc += a.at(i, p) * b.at(p, j);
            }
            c[i * n + j] = acc;
        }
    }
}

impl<T: Real> Tape<T> {
    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(shape_err!("matmul: {:?} x {:?}", ad, bd));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let (sa, sb) = (a.clone(), b.clone());
        self.record(vec![m, n], out, &[a, b], move |g, sink| {
            if let Some(da) = sink.slot(0) {
                gemm(m, n, k, g, false, sb.data(), true, da, true);
            }
            if let Some(db) = sink.slot(1) {
                gemm(k, m, n, sa.data(), true, g, false, db, true);
            }
        })
    }

    /// Batched matmul over all leading axes: `[..., m, k] × [..., k, n]`.
    /// With `trans_b`, `b` is `[..., n, k]`.
    pub fn bmm(&self, a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let (ad, bd) = (a.dims(), b.dims());
        let r = ad.len();
        if r < 2 || bd.len() != r || ad[..r - 2] != bd[..r - 2] {
            return Err(shape_err!("bmm: {:?} x {:?}", ad, bd));
        }
        let (m, k) = (ad[r - 2], ad[r - 1]);
        let (kb, n) = if trans_b {
            (bd[r - 1], bd[r - 2])
        } else {
            (bd[r - 2], bd[r - 1])
        };
        if k != kb {
            return Err(shape_err!(
                "bmm inner extent: {:?} x {:?} (trans_b={})",
                ad,
                bd,
                trans_b
            ));
        }
        let batch: usize = ad[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut dims = ad[..r - 2].to_vec();
        dims.extend_from_slice(&[m, n]);
        let (sa, sb) = (a.clone(), b.clone());
        self.record(dims, out, &[a, b], move |g, sink| {
            if let Some(da) = sink.slot(0) {
                for i in 0..batch {
                    let gi = &g[i * m * n..];
                    let bi = &sb.data()[i * k * n..];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    // da = g · op(b)ᵀ
                    gemm(m, n, k, gi, false, bi, !trans_b, dai, true);
                }
            }
            if let Some(db) = sink.slot(1) {
                for i in 0..batch {
                    let gi = &g[i * m * n..];
                    let ai = &sa.data()[i * m * k..];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, gi, true, ai, false, dbi, true);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dbi, true);
                    }
                }
            }
        })
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + bias[out]`.
    pub fn linear(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let xd = x.dims();
        let wd = w.dims();
        if wd.len() != 2 || xd.last() != Some(&wd[0]) {
            return Err(shape_err!("linear: input {:?}, weight {:?}", xd, wd));
        }
        let (din, dout) = (wd[0], wd[1]);
        if let Some(b) = bias {
            if b.dims() != [dout] {
                return Err(shape_err!(
                    "linear: bias {:?} for output width {}",
                    b.dims(),
                    dout
                ));
            }
        }
        let rows = x.numel() / din;
        let mut out = Vec::with_capacity(rows * dout);
        match bias {
            Some(b) => {
                for _ in 0..rows {
                    out.extend_from_slice(b.data());
                }
            }
            None => out.resize(rows * dout, T::zero()),
        }
        gemm(
            rows,
            din,
            dout,
            x.data(),
            false,
            w.data(),
            false,
            &mut out,
            true,
        );
        let mut dims = xd.to_vec();
        *dims.last_mut().unwrap() = dout;
        let (sx, sw) = (x.clone(), w.clone());
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.record(dims, out, &inputs, move |g, sink| {
            if let Some(dx) = sink.slot(0) {
                gemm(rows, dout, din, g, false, sw.data(), true, dx, true);
            }
            if let Some(dw) = sink.slot(1) {
                gemm(din, rows, dout, sx.data(), true, g, false, dw, true);
            }
            if let Some(db) = sink.slot(2) {
                for row in g.chunks_exact(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        })
    }
}
