use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{shape_err, Result};
use crate::real::{DType, Real};

/// Handle into the differentiation tape that produced a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GradId {
    pub(crate) tape: usize,
    pub(crate) node: usize,
}

/// Dense row-major tensor.
///
/// The buffer is shared and never mutated after construction, so clones are
/// cheap and tensors can be handed across threads read-only.
#[derive(Clone)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
    grad_id: Option<GradId>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(shape_err!("zero extent in dims {:?}", dims));
        }
        if n != data.len() {
            return Err(shape_err!(
                "data length {} does not match dims {:?} (numel {})",
                data.len(),
                dims,
                n
            ));
        }
        Ok(Self::from_parts(dims.to_vec(), data))
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: Arc::new(data),
            grad_id: None,
        }
    }

    pub(crate) fn with_grad(mut self, id: Option<GradId>) -> Self {
        self.grad_id = id;
        self
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(f).collect())
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn grad_id(&self) -> Option<GradId> {
        self.grad_id
    }

    pub fn is_tracked(&self) -> bool {
        self.grad_id.is_some()
    }

    /// Same values, no tape handle.
    pub fn detach(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.clone(),
            grad_id: None,
        }
    }

    /// Untracked reshape; shares the buffer.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.numel() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data.clone(),
            grad_id: None,
        })
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {:?} out of bounds for {:?}", index, self.dims);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Converts element type, dropping any tape handle.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of dims and values.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.dims)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        if let Some(id) = self.grad_id {
            write!(f, " (node {})", id.node)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_dims() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.dtype(), DType::F64);
    }

    #[test]
    fn reshape_shares_values() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.at(&[2, 1]), 5.0);
        assert!(t.reshaped(&[4]).is_err());
    }
}
