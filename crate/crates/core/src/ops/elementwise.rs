use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn same_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{}: {:?} vs {:?}", op, a.dims(), b.dims()));
    }
    Ok(())
}

fn trailing<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<usize> {
    let (ad, bd) = (a.dims(), b.dims());
    if bd.len() > ad.len() || ad[ad.len() - bd.len()..] != *bd {
        return Err(shape_err!(
            "{}: {:?} is not a trailing shape of {:?}",
            op,
            bd,
            ad
        ));
    }
    Ok(b.numel())
}

impl<T: Real> Tape<T> {
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_dims(a, b, "add")?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.record(a.dims().to_vec(), out, &[a, b], |g, sink| {
            sink.add(0, g);
            sink.add(1, g);
        })
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_dims(a, b, "sub")?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        self.record(a.dims().to_vec(), out, &[a, b], |g, sink| {
            sink.add(0, g);
            if let Some(d) = sink.slot(1) {
                for (d, &v) in d.iter_mut().zip(g) {
                    *d -= v;
                }
            }
        })
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_dims(a, b, "mul")?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let (sa, sb) = (a.clone(), b.clone());
        self.record(a.dims().to_vec(), out, &[a, b], move |g, sink| {
            if let Some(d) = sink.slot(0) {
                for ((d, &v), &y) in d.iter_mut().zip(g).zip(sb.data()) {
                    *d += v * y;
                }
            }
            if let Some(d) = sink.slot(1) {
                for ((d, &v), &x) in d.iter_mut().zip(g).zip(sa.data()) {
                    *d += v * x;
                }
            }
        })
    }

    /// `a + b` where `b`'s dims are a suffix of `a`'s (bias, position
    /// embedding over the batch).
    pub fn add_trailing(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let m = trailing(a, b, "add_trailing")?;
        let out = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[i % m])
            .collect();
        self.record(a.dims().to_vec(), out, &[a, b], move |g, sink| {
            sink.add(0, g);
            if let Some(d) = sink.slot(1) {
                for chunk in g.chunks_exact(m) {
                    for (d, &v) in d.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
            }
        })
    }

    /// `a ⊙ b` with `b` broadcast over the leading axes of `a`.
    pub fn mul_trailing(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let m = trailing(a, b, "mul_trailing")?;
        let out = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data()[i % m])
            .collect();
        let (sa, sb) = (a.clone(), b.clone());
        self.record(a.dims().to_vec(), out, &[a, b], move |g, sink| {
            if let Some(d) = sink.slot(0) {
                for (i, (d, &v)) in d.iter_mut().zip(g).enumerate() {
                    *d += v * sb.data()[i % m];
                }
            }
            if let Some(d) = sink.slot(1) {
                for (gc, xc) in g.chunks_exact(m).zip(sa.data().chunks_exact(m)) {
                    for ((d, &v), &x) in d.iter_mut().zip(gc).zip(xc) {
                        *d += v * x;
                    }
                }
            }
        })
    }

    pub fn scale(&self, x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| v * s).collect();
        self.record(x.dims().to_vec(), out, &[x], move |g, sink| {
            if let Some(d) = sink.slot(0) {
                for (d, &v) in d.iter_mut().zip(g) {
                    *d += v * s;
                }
            }
        })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.record(vec![1], vec![s], &[x], |g, sink| {
            if let Some(d) = sink.slot(0) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        })
    }

    pub fn mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = T::lit(x.numel() as f64);
        let s = self.sum(x)?;
        self.scale(&s, T::one() / n)
    }

    /// Sum over a set of same-shaped tensors.
    pub fn add_n(&self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = xs.first().ok_or_else(|| shape_err!("add_n of nothing"))?;
        for x in xs {
            same_dims(first, x, "add_n")?;
        }
        let mut out: Vec<T> = first.to_vec();
        for x in &xs[1..] {
            for (o, &v) in out.iter_mut().zip(x.data()) {
                *o += v;
            }
        }
        let k = xs.len();
        self.record(first.dims().to_vec(), out, xs, move |g, sink| {
            for slot in 0..k {
                sink.add(slot, g);
            }
        })
    }
}
