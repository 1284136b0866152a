use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::{numel, Tensor};

/// Materializes `data` (row-major with `dims`) with axes reordered by `perm`:
/// output axis `i` is input axis `perm[i]`.
pub fn permute_raw<T: Copy>(data: &[T], dims: &[usize], perm: &[usize]) -> Vec<T> {
    let r = dims.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    // Odometer over the output index; the innermost axis is copied in a run.
    let inner = out_dims[r - 1];
    let inner_stride = strides[r - 1];
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[src..src + inner]);
        } else {
            out.extend((0..inner).map(|j| data[src + j * inner_stride]));
        }
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            src -= strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
}

fn check_perm(perm: &[usize], rank: usize) -> bool {
    let mut seen = vec![false; rank];
    perm.len() == rank
        && perm
            .iter()
            .all(|&p| p < rank && !core::mem::replace(&mut seen[p], true))
}

impl<T: Real> Tape<T> {
    pub fn reshape(&self, x: &Tensor<T>, dims: &[usize]) -> Result<Tensor<T>> {
        if numel(dims) != x.numel() {
            return Err(shape_err!("reshape {:?} -> {:?}", x.dims(), dims));
        }
        if !self.needs_grad(&[x]) {
            return x.reshaped(dims);
        }
        self.record(dims.to_vec(), x.to_vec(), &[x], |g, sink| sink.add(0, g))
    }

    pub fn permute(&self, x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
        if !check_perm(perm, x.rank()) {
            return Err(shape_err!(
                "invalid permutation {:?} for rank {}",
                perm,
                x.rank()
            ));
        }
        let out = permute_raw(x.data(), x.dims(), perm);
        let out_dims: Vec<usize> = perm.iter().map(|&p| x.dims()[p]).collect();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let od = out_dims.clone();
        self.record(out_dims, out, &[x], move |g, sink| {
            if sink.wants(0) {
                let back = permute_raw(g, &od, &inverse);
                sink.add_owned(0, back);
            }
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(
        &self,
        x: &Tensor<T>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<T>> {
        let d = x.dims();
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            return Err(shape_err!(
                "narrow axis {} [{}, +{}) of {:?}",
                axis,
                start,
                len,
                d
            ));
        }
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let full = d[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut dims = d.to_vec();
        dims[axis] = len;
        self.record(dims, out, &[x], move |g, sink| {
            if let Some(dx) = sink.slot(0) {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &v) in dx[base..base + len * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let d0 = first.dims();
        if axis >= d0.len() {
            return Err(shape_err!("concat axis {} for rank {}", axis, d0.len()));
        }
        for x in xs {
            let d = x.dims();
            if d.len() != d0.len()
                || d.iter()
                    .zip(d0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!(
                    "concat: {:?} vs {:?} along axis {}",
                    d,
                    d0,
                    axis
                ));
            }
        }
        let outer: usize = d0[..axis].iter().product();
        let inner: usize = d0[axis + 1..].iter().product();
        let sizes: Vec<usize> = xs.iter().map(|x| x.dims()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &s) in xs.iter().zip(&sizes) {
                out.extend_from_slice(&x.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut dims = d0.to_vec();
        dims[axis] = total;
        self.record(dims, out, xs, move |g, sink| {
            let mut offset = 0;
            for (slot, &s) in sizes.iter().enumerate() {
                if let Some(dx) = sink.slot(slot) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + s) * inner];
                        for (d, &v) in dx[o * s * inner..(o + 1) * s * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += s;
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let data: Vec<i32> = (0..6).collect();
        assert_eq!(permute_raw(&data, &[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn permute_rank3_matches_index_formula() {
        let dims = [2, 3, 4];
        let data: Vec<usize> = (0..24).collect();
        let out = permute_raw(&data, &dims, &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], (i * 3 + j) * 4 + k);
                }
            }
        }
    }

    #[test]
    fn narrow_and_concat_invert() {
        let t = Tape::<f64>::inference();
        let x = Tensor::from_fn(&[2, 5, 3], |i| i as f64);
        let a = t.narrow(&x, 1, 0, 2).unwrap();
        let b = t.narrow(&x, 1, 2, 3).unwrap();
        let y = t.concat(&[&a, &b], 1).unwrap();
        assert!(y.bit_eq(&x));
        assert!(t.narrow(&x, 1, 4, 2).is_err());
        assert!(t.permute(&x, &[0, 0, 1]).is_err());
    }
}
