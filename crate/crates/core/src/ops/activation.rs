use crate::error::Result;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let inner = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

impl<T: Real> Tape<T> {
    pub fn relu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let sx = x.clone();
        self.record(x.dims().to_vec(), out, &[x], move |g, sink| {
            if let Some(d) = sink.slot(0) {
                for ((d, &v), &xv) in d.iter_mut().zip(g).zip(sx.data()) {
                    if xv > T::zero() {
                        *d += v;
                    }
                }
            }
        })
    }

    pub fn gelu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = x.data().iter().map(|&v| gelu_scalar(v)).collect();
        let sx = x.clone();
        self.record(x.dims().to_vec(), out, &[x], move |g, sink| {
            if let Some(d) = sink.slot(0) {
                for ((d, &v), &xv) in d.iter_mut().zip(g).zip(sx.data()) {
                    *d += v * gelu_grad_scalar(xv);
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
    }
}
