//! Scaled dot-product multi-head attention shared by the backbone's
//! self-attention and the dense global cross-attention.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `[B, T, H·dh] -> [B, H, T, dh]`
pub(crate) fn split_heads<T: Real>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() != 3 || !d[2].is_multiple_of(heads) {
        return Err(shape_err!("cannot split {:?} into {heads} heads", d));
    }
    let (b, t, c) = (d[0], d[1], d[2]);
    let r = tape.reshape(x, &[b, t, heads, c / heads])?;
    tape.permute(&r, &[0, 2, 1, 3])
}

/// `[B, H, T, dh] -> [B, T, H·dh]`
pub(crate) fn merge_heads<T: Real>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    let (b, h, t, dh) = (d[0], d[1], d[2], d[3]);
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(&p, &[b, t, h * dh])
}

/// softmax(q·kᵀ/√dh)·v over already projected `q [B,Tq,C]`, `k, v [B,Tk,C]`.
/// Returns the merged output `[B,Tq,C]` and the probabilities `[B,H,Tq,Tk]`.
pub fn dot_product_attention<T: Real>(
    tape: &Tape<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() != 3
        || k.dims() != v.dims()
        || k.rank() != 3
        || q.dims()[0] != k.dims()[0]
        || q.dims()[2] != k.dims()[2]
    {
        return Err(shape_err!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        ));
    }
    let dh = q.dims()[2] / heads.max(1);
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let scores = tape.bmm(&qh, &kh, true)?;
    let scores = tape.scale(&scores, T::lit(1.0 / libm::sqrt(dh as f64)))?;
    let probs = tape.softmax(&scores, 3)?;
    let out = tape.bmm(&probs, &vh, false)?;
    Ok((merge_heads(tape, &out)?, probs))
}
