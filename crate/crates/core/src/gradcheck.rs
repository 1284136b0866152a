//! Central finite-difference verification of analytic gradients.
//!
//! Works purely through forward evaluation on non-recording tapes, so it is
//! independent of every backward rule it checks.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so entries with near-zero
/// gradients are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries: Option<usize>,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Indices checked for an input of `n` elements.
pub fn sampled_entries(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let m = m.max(1);
            (0..m)
                .map(|i| i * n / m + (n / m) / 2)
                .map(|i| i.min(n - 1))
                .collect()
        }
        _ => (0..n).collect(),
    }
}

/// Compares the tape gradient of the scalar `loss(inputs)` with respect to
/// every input against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], cfg: FdConfig, loss: F) -> Result<Vec<InputReport>>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let l = loss(&tape, &leaves)?;
    let grads = tape.backward(&l)?;
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::inference();
        Ok(loss(&t, vals)?.item())
    };
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let g = grads.get_or_zeros(leaf);
        let mut rep = InputReport {
            entries: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        let mut vals: Vec<Tensor<f64>> = inputs.to_vec();
        for e in sampled_entries(leaf.numel(), cfg.max_entries) {
            let mut plus = inputs[i].to_vec();
            plus[e] += cfg.step;
            vals[i] = Tensor::new(inputs[i].dims(), plus)?;
            let fp = eval(&vals)?;
            let mut minus = inputs[i].to_vec();
            minus[e] -= cfg.step;
            vals[i] = Tensor::new(inputs[i].dims(), minus)?;
            let fm = eval(&vals)?;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let analytic = g.data()[e];
            rep.entries += 1;
            rep.max_rel_err = rep.max_rel_err.max(rel_err(analytic, numeric));
            rep.max_abs_err = rep.max_abs_err.max((analytic - numeric).abs());
        }
        vals[i] = inputs[i].clone();
        reports.push(rep);
    }
    Ok(reports)
}

/// Like [`check`], but differentiates with respect to every tensor of a
/// parameter store. Reports come back in store order, named.
pub fn check_params<F>(
    params: &ParamStore<f64>,
    cfg: FdConfig,
    loss: F,
) -> Result<Vec<(String, InputReport)>>
where
    F: Fn(&Ctx<'_, f64>) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params);
    let l = loss(&ctx)?;
    let grads = tape.backward(&l)?;
    let analytic = ctx.param_grads(&grads);
    let mut work = params.clone();
    let eval = |work: &ParamStore<f64>| -> Result<f64> {
        let t = Tape::inference();
        Ok(loss(&Ctx::new(&t, work))?.item())
    };
    let mut reports = Vec::with_capacity(params.len());
    for (id, p) in params.iter() {
        let mut rep = InputReport {
            entries: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for e in sampled_entries(p.value.numel(), cfg.max_entries) {
            let mut v = p.value.to_vec();
            v[e] += cfg.step;
            work.set(id, Tensor::new(p.value.dims(), v.clone())?)?;
            let fp = eval(&work)?;
            v[e] = p.value.data()[e] - cfg.step;
            work.set(id, Tensor::new(p.value.dims(), v)?)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[e]);
            rep.entries += 1;
            rep.max_rel_err = rep.max_rel_err.max(rel_err(a, numeric));
            rep.max_abs_err = rep.max_abs_err.max((a - numeric).abs());
        }
        work.set(id, p.value.clone())?;
        reports.push((p.name.clone(), rep));
    }
    Ok(reports)
}

/// Projects an arbitrary output onto a scalar with fixed pseudo-random
/// weights, so every output element contributes a distinct coefficient.
pub fn weighted_sum(tape: &Tape<f64>, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let w = Tensor::from_fn(y.dims(), |i| libm::sin(i as f64 * 1.618_033_988 + 0.3));
    let p = tape.mul(y, &w)?;
    tape.sum(&p)
}
