use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    /// Mean per-pixel cross-entropy of `logits [B, K, H, W]` against class
    /// ids laid out `[B, H, W]`.
    pub fn cross_entropy(&self, logits: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
        let d = logits.dims();
        if d.len() != 4 || labels.len() != d[0] * d[2] * d[3] {
            return Err(shape_err!(
                "cross_entropy: logits {:?}, {} labels",
                d,
                labels.len()
            ));
        }
        let (b, k, hw) = (d[0], d[1], d[2] * d[3]);
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(shape_err!("cross_entropy: label {} for {} classes", bad, k));
        }
        let xs = logits.data();
        let count = T::lit((b * hw) as f64);
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = T::zero();
        for bi in 0..b {
            for p in 0..hw {
                let at = |c: usize| (bi * k + c) * hw + p;
                let m = (0..k).map(|c| xs[at(c)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for c in 0..k {
                    let e = (xs[at(c)] - m).exp();
                    probs[at(c)] = e;
                    s += e;
                }
                for c in 0..k {
                    probs[at(c)] /= s;
                }
                let y = labels[bi * hw + p] as usize;
                total += m + s.ln() - xs[at(y)];
            }
        }
        let labels: Arc<Vec<u8>> = Arc::new(labels.to_vec());
        self.record(vec![1], vec![total / count], &[logits], move |g, sink| {
            if let Some(dx) = sink.slot(0) {
                let scale = g[0] / count;
                for (i, (d, &p)) in dx.iter_mut().zip(&probs).enumerate() {
                    let (bi, rest) = (i / (k * hw), i % (k * hw));
                    let (c, pix) = (rest / hw, rest % hw);
                    let hot = if labels[bi * hw + pix] as usize == c {
                        T::one()
                    } else {
                        T::zero()
                    };
                    *d += scale * (p - hot);
                }
            }
        })
    }
}
