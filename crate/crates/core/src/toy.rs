//! Synthetic dense-prediction task: coloured rectangles and circles on a
//! noisy background, a minimal segmentation head and an AdamW trainer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::tokens_to_map;
use crate::config::{InteractionMode, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::model::{PlainVit, ViTAdapter};
use crate::nn::{component_rng, Conv2d, Ctx, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const TOY_SIZE: usize = 128;
pub const TOY_CLASSES: usize = 5;

const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
const COLORS: [[f32; 3]; 4] = [
    [0.8, 0.3, 0.3],
    [0.3, 0.8, 0.3],
    [0.3, 0.3, 0.8],
    [0.75, 0.75, 0.3],
];
const NOISE: f32 = 0.2;
/// Held-out samples use stream indices from here on.
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    /// `[3, S, S]`, channel-major.
    pub image: Vec<f32>,
    /// `[S, S]` class ids, 0 = background.
    pub label: Vec<u8>,
}

impl ToySample {
    pub fn background_fraction(&self) -> f64 {
        self.label.iter().filter(|&&c| c == 0).count() as f64 / self.label.len() as f64
    }
}

fn paint_shapes(rng: &mut ChaCha8Rng, label: &mut [u8]) {
    let s = TOY_SIZE as i64;
    let n = rng.gen_range(2..=5);
    for _ in 0..n {
        let class = rng.gen_range(1..=4u8);
        if rng.gen_bool(0.5) {
            let (w, h) = (rng.gen_range(16..=56i64), rng.gen_range(16..=56i64));
            let (x0, y0) = (rng.gen_range(0..=s - w), rng.gen_range(0..=s - h));
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    label[(y * s + x) as usize] = class;
                }
            }
        } else {
            let r = rng.gen_range(8..=28i64);
            let (cx, cy) = (rng.gen_range(r..=s - r), rng.gen_range(r..=s - r));
            for y in cy - r..cy + r {
                for x in cx - r..cx + r {
                    let (dx, dy) = (2 * (x - cx) + 1, 2 * (y - cy) + 1);
                    if dx * dx + dy * dy <= 4 * r * r {
                        label[(y * s + x) as usize] = class;
                    }
                }
            }
        }
    }
}

fn sample_from_stream(seed: u64, stream: u64) -> ToySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let px = TOY_SIZE * TOY_SIZE;
    let mut label = vec![0u8; px];
    loop {
        label.iter_mut().for_each(|c| *c = 0);
        paint_shapes(&mut rng, &mut label);
        let bg = label.iter().filter(|&&c| c == 0).count() as f64 / px as f64;
        if bg > 0.2 && bg < 0.9 {
            break;
        }
    }
    let noise = Normal::new(0.0f32, NOISE).expect("finite noise");
    let mut image = vec![0.0f32; 3 * px];
    for (i, &c) in label.iter().enumerate() {
        let color = if c == 0 {
            BACKGROUND
        } else {
            COLORS[c as usize - 1]
        };
        for ch in 0..3 {
            image[ch * px + i] = (color[ch] + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    ToySample { image, label }
}

/// Training sample `index`; independent of every other index.
pub fn generate_sample(seed: u64, index: u64) -> ToySample {
    sample_from_stream(seed, index)
}

pub fn generate_dataset(seed: u64, n: usize) -> Vec<ToySample> {
    (0..n as u64).map(|i| generate_sample(seed, i)).collect()
}

/// Held-out split, disjoint from every training index.
pub fn generate_eval_set(seed: u64, n: usize) -> Vec<ToySample> {
    (0..n as u64)
        .map(|i| sample_from_stream(seed, EVAL_STREAM + i))
        .collect()
}

/// Training batches in index order: batch `k` holds samples `k·b .. (k+1)·b`.
pub struct SampleStream {
    pub seed: u64,
    pub batch: usize,
    pub next_index: u64,
}

impl Iterator for SampleStream {
    type Item = Vec<ToySample>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next_index;
        self.next_index += self.batch as u64;
        Some(
            (start..self.next_index)
                .map(|i| generate_sample(self.seed, i))
                .collect(),
        )
    }
}

/// Images `[B, 3, S, S]` and flattened labels of a batch.
pub fn stack_batch<T: Real>(samples: &[ToySample]) -> Result<(Tensor<T>, Vec<u8>)> {
    if samples.is_empty() {
        return Err(shape_err!("empty batch"));
    }
    let mut img = Vec::with_capacity(samples.len() * 3 * TOY_SIZE * TOY_SIZE);
    let mut labels = Vec::with_capacity(samples.len() * TOY_SIZE * TOY_SIZE);
    for s in samples {
        img.extend(s.image.iter().map(|&v| T::lit(v as f64)));
        labels.extend_from_slice(&s.label);
    }
    Ok((
        Tensor::new(&[samples.len(), 3, TOY_SIZE, TOY_SIZE], img)?,
        labels,
    ))
}

/// Mean IoU over the classes present in `truth`.
pub fn miou(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err!(
            "miou: {} predictions for {} labels",
            pred.len(),
            truth.len()
        ));
    }
    let (mut inter, mut union, mut present) = (
        vec![0usize; classes],
        vec![0usize; classes],
        vec![false; classes],
    );
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if t >= classes || p >= classes {
            return Err(shape_err!("class id out of range 0..{classes}"));
        }
        present[t] = true;
        if p == t {
            inter[t] += 1;
            union[t] += 1;
        } else {
            union[t] += 1;
            union[p] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Per-stride 1x1 classifiers, summed at stride 4 and upsampled to input size.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub classifiers: [Conv2d; 4],
}

impl SegHead {
    /// Classifier weights start small (std 0.02) so initial logits are near zero.
    pub fn new<T: Real>(init: &mut Init<'_, T>, dim: usize, classes: usize) -> Self {
        let mk = |i: usize, init: &mut Init<'_, T>| {
            let mut s = init.scope(&format!("{i}"));
            let weight = s.normal("weight", &[classes, dim, 1, 1], 0.02);
            let bias = Some(s.zeros("bias", &[classes]));
            Conv2d {
                weight,
                bias,
                stride: 1,
                pad: 0,
            }
        };
        Self {
            classifiers: [mk(0, init), mk(1, init), mk(2, init), mk(3, init)],
        }
    }

    /// `maps` at strides 4, 8, 16, 32 → logits `[B, K, H, W]`.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        maps: &[Tensor<T>; 4],
        out: (usize, usize),
    ) -> Result<Tensor<T>> {
        let t = ctx.tape;
        let (h4, w4) = (maps[0].dims()[2], maps[0].dims()[3]);
        let mut parts = Vec::with_capacity(4);
        for (c, m) in self.classifiers.iter().zip(maps) {
            let y = c.forward(ctx, m)?;
            parts.push(if (y.dims()[2], y.dims()[3]) == (h4, w4) {
                y
            } else {
                t.resize_bilinear(&y, h4, w4)?
            });
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let sum = t.add_n(&refs)?;
        t.resize_bilinear(&sum, out.0, out.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    PlainVit,
    Adapter(InteractionMode),
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::PlainVit,
        ModelKind::Adapter(InteractionMode::None),
        ModelKind::Adapter(InteractionMode::Add),
        ModelKind::Adapter(InteractionMode::Attention),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PlainVit => "plain-vit",
            ModelKind::Adapter(InteractionMode::None) => "adapter-none",
            ModelKind::Adapter(InteractionMode::Add) => "adapter-add",
            ModelKind::Adapter(InteractionMode::Attention) => "vit-adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Debug)]
enum Trunk {
    Plain(PlainVit),
    Adapter(ViTAdapter),
}

/// Trunk plus segmentation head over one parameter store.
#[derive(Clone, Debug)]
pub struct ToyNet {
    trunk: Trunk,
    pub head: SegHead,
}

impl ToyNet {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        kind: ModelKind,
        seed: u64,
    ) -> Result<Self> {
        let trunk = match kind {
            ModelKind::PlainVit => Trunk::Plain(PlainVit::register(store, cfg, seed)?),
            ModelKind::Adapter(mode) => {
                let mut c = cfg.clone();
                c.mode = mode;
                Trunk::Adapter(ViTAdapter::register(store, &c, seed)?)
            }
        };
        let mut rng = component_rng(seed, "head");
        let head = SegHead::new(
            &mut Init::new(store, &mut rng, "head"),
            cfg.embed_dim,
            TOY_CLASSES,
        );
        Ok(Self { trunk, head })
    }

    /// Feature maps at strides 4, 8, 16, 32.
    pub fn features<T: Real>(&self, ctx: &Ctx<'_, T>, image: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        match &self.trunk {
            Trunk::Adapter(a) => Ok(a.forward(ctx, image)?.maps),
            Trunk::Plain(p) => {
                let (blocks, grid) = p.forward_blocks(ctx, image)?;
                let last = blocks.last().ok_or_else(|| shape_err!("no blocks"))?;
                let m16 = tokens_to_map(ctx.tape, last, grid)?;
                let (h, w) = (image.dims()[2], image.dims()[3]);
                let at = |s: usize| {
                    if s == 16 {
                        Ok(m16.clone())
                    } else {
                        ctx.tape.resize_bilinear(&m16, h / s, w / s)
                    }
                };
                Ok([at(4)?, at(8)?, at(16)?, at(32)?])
            }
        }
    }

    pub fn logits<T: Real>(&self, ctx: &Ctx<'_, T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let maps = self.features(ctx, image)?;
        self.head
            .forward(ctx, &maps, (image.dims()[2], image.dims()[3]))
    }
}

/// Per-pixel argmax of `[B, K, H, W]` logits.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let d = logits.dims();
    let (b, k, hw) = (d[0], d[1], d[2] * d[3]);
    let x = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if x[(bi * k + c) * hw + p] > x[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup: usize,
    pub log_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup: 50,
            log_every: 50,
            eval_samples: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Linear warmup then cosine decay to zero at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup && self.warmup > 0 {
            return self.lr * step as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let p = (step - self.warmup) as f64 / span;
        0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * p.min(1.0)))
    }
}

/// Decoupled-weight-decay Adam.
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.numel()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            betas,
            eps,
            weight_decay,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        let (b1t, b2t, eps) = (T::lit(b1), T::lit(b2), T::lit(self.eps));
        let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else {
                continue;
            };
            let p = params.get(id);
            let shrink = if p.decay {
                T::lit(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let (step, inv_c1, inv_c2) = (T::lit(lr), T::lit(1.0 / c1), T::lit(1.0 / c2));
            let mut data = p.value.to_vec();
            for (i, (x, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                m[i] = b1t * m[i] + (T::one() - b1t) * gi;
                v[i] = b2t * v[i] + (T::one() - b2t) * gi * gi;
                let update = (m[i] * inv_c1) / ((v[i] * inv_c2).sqrt() + eps);
                *x = *x * shrink - step * update;
            }
            params.set(id, Tensor::new(p.value.dims(), data)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Loss of every step.
    pub losses: Vec<f64>,
    pub final_miou: f64,
}

impl TrainLog {
    /// Header `step,loss,miou`, one row per log point, then `final_miou=<x>`.
    pub fn to_csv(&self) -> String {
        use core::fmt::Write;
        let mut s = String::from("step,loss,miou\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.step, r.loss, r.miou);
        }
        let _ = writeln!(s, "final_miou={:.6}", self.final_miou);
        s
    }
}

/// mIoU of `net` on `samples`, evaluated in chunks of `batch`.
pub fn evaluate<T: Real>(
    net: &ToyNet,
    params: &ParamStore<T>,
    samples: &[ToySample],
    batch: usize,
) -> Result<f64> {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for chunk in samples.chunks(batch.max(1)) {
        let (img, labels) = stack_batch::<T>(chunk)?;
        let tape = Tape::inference();
        let logits = net.logits(&Ctx::new(&tape, params), &img)?;
        pred.extend(argmax_classes(&logits));
        truth.extend(labels);
    }
    miou(&pred, &truth, TOY_CLASSES)
}

/// Trains `kind` from seed `tc.seed` on batches drawn from `source`.
/// `on_row` sees each log row as it is produced.
pub fn train<T: Real, I>(
    cfg: &ModelConfig,
    kind: ModelKind,
    tc: &TrainConfig,
    source: I,
    mut on_row: impl FnMut(&LogRow),
) -> Result<(TrainLog, ToyNet, ParamStore<T>)>
where
    I: IntoIterator<Item = Vec<ToySample>>,
{
    let mut params = ParamStore::new();
    let net = ToyNet::register(&mut params, cfg, kind, tc.seed)?;
    let eval = generate_eval_set(tc.seed, tc.eval_samples);
    let mut opt = AdamW::new(&params, tc.betas, tc.eps, tc.weight_decay);
    let mut source = source.into_iter();
    let (mut rows, mut losses) = (Vec::new(), Vec::with_capacity(tc.steps));
    let mut since = 0usize;
    for step in 1..=tc.steps {
        let batch = source
            .next()
            .ok_or_else(|| Error::Usage("sample source ran dry".into()))?;
        let (img, labels) = stack_batch::<T>(&batch)?;
        let tape = Tape::new();
        let grads = {
            let ctx = Ctx::new(&tape, &params);
            let logits = net.logits(&ctx, &img)?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            losses.push(loss.item().as_f64());
            let g = tape.backward(&loss)?;
            ctx.param_grads(&g)
        };
        opt.step(&mut params, &grads, tc.lr_at(step))?;
        since += 1;
        if step % tc.log_every.max(1) == 0 || step == tc.steps {
            let window = &losses[losses.len() - since..];
            let loss = window.iter().sum::<f64>() / since as f64;
            let row = LogRow {
                step,
                loss,
                miou: evaluate(&net, &params, &eval, tc.batch)?,
            };
            on_row(&row);
            rows.push(row);
            since = 0;
        }
    }
    let final_miou = match rows.last() {
        Some(r) if r.step == tc.steps => r.miou,
        _ => evaluate(&net, &params, &eval, tc.batch)?,
    };
    Ok((
        TrainLog {
            rows,
            losses,
            final_miou,
        },
        net,
        params,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_hand_cases() {
        assert_eq!(miou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        assert!(miou(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn lr_schedule_shape() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at(0), 0.0);
        assert!((tc.lr_at(50) - 1e-3).abs() < 1e-15);
        assert!(tc.lr_at(1000).abs() < 1e-15);
        assert!(tc.lr_at(500) < tc.lr_at(200));
    }
}
