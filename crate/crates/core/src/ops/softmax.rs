use alloc::vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let d = x.dims();
        if axis >= d.len() {
            return Err(shape_err!("softmax axis {} for dims {:?}", axis, d));
        }
        let outer: usize = d[..axis].iter().product();
        let len = d[axis];
        let inner: usize = d[axis + 1..].iter().product();
        let xs = x.data();
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(xs[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xs[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let y = Tensor::from_parts(d.to_vec(), out.clone());
        self.record(d.to_vec(), out, &[x], move |g, sink| {
            if let Some(dx) = sink.slot(0) {
                let ys = y.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[at(j)] * ys[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] += ys[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        })
    }
}
