//! The finite-difference suite behind the `gradcheck` command: every
//! differentiable kernel, every parameterized module, and the whole model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{AttnMode, EncoderLayer};
use crate::config::{AttentionKind, ModelConfig};
use crate::deform::{layout_reference_points, reference_points, DeformAttn, GlobalAttn};
use crate::error::Result;
use crate::gradcheck::{check, check_params, weighted_sum, FdConfig};
use crate::interaction::{Extractor, Injector, InteractionState};
use crate::model::AdapterModel;
use crate::nn::{
    component_rng, Conv2d, ConvTranspose2d, Ctx, GroupNorm, Init, LayerNorm, Linear, ParamStore,
};
use crate::spm::{ScaleLayout, SpatialPrior};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Bound for single kernels.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Bound for composed modules and the full model.
pub const MODULE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub tolerance: f64,
    pub entries: usize,
    pub max_rel_err: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.sample::<f64, _>(StandardNormal))
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let v = store.value(id).clone();
        let noisy = Tensor::from_fn(v.dims(), |i| {
            v.data()[i] + scale * rng.sample::<f64, _>(StandardNormal)
        });
        store.set(id, noisy)?;
    }
    Ok(())
}

struct Suite {
    rng: ChaCha8Rng,
    cases: Vec<CaseReport>,
}

impl Suite {
    fn op<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let reports = check(inputs, FdConfig::default(), |t, xs| {
            weighted_sum(t, &f(t, xs)?)
        })?;
        self.cases.push(CaseReport {
            name: name.into(),
            tolerance: OP_TOLERANCE,
            entries: reports.iter().map(|r| r.entries).sum(),
            max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        });
        Ok(())
    }

    fn params<F>(
        &mut self,
        name: &str,
        tol: f64,
        store: &ParamStore<f64>,
        max_entries: Option<usize>,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&Ctx<'_, f64>) -> Result<Tensor<f64>>,
    {
        let cfg = FdConfig {
            max_entries,
            ..FdConfig::default()
        };
        let reports = check_params(store, cfg, |ctx| weighted_sum(ctx.tape, &f(ctx)?))?;
        self.cases.push(CaseReport {
            name: name.into(),
            tolerance: tol,
            entries: reports.iter().map(|(_, r)| r.entries).sum(),
            max_rel_err: reports
                .iter()
                .map(|(_, r)| r.max_rel_err)
                .fold(0.0, f64::max),
        });
        Ok(())
    }

    fn kernels(&mut self) -> Result<()> {
        let r = &mut self.rng;
        let mm = [randn(r, &[3, 5]), randn(r, &[5, 4])];
        let bmm = [randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])];
        let lin = [randn(r, &[2, 3, 5]), randn(r, &[5, 4]), randn(r, &[4])];
        let conv = [
            randn(r, &[2, 3, 6, 6]),
            randn(r, &[4, 3, 3, 3]),
            randn(r, &[4]),
        ];
        let convt = [
            randn(r, &[1, 3, 3, 3]),
            randn(r, &[3, 2, 2, 2]),
            randn(r, &[2]),
        ];
        let pool = [randn(r, &[2, 2, 6, 6])];
        let ln = [randn(r, &[3, 8]), randn(r, &[8]), randn(r, &[8])];
        let gn = [randn(r, &[2, 4, 3, 3]), randn(r, &[4]), randn(r, &[4])];
        let soft = [randn(r, &[3, 4, 5])];
        let act = [randn(r, &[17])];
        let bil = [
            randn(r, &[2, 3, 4, 4]),
            randn(r, &[2, 5, 2]).map(|v| 0.5 + 0.4 * libm::tanh(v)),
        ];
        let up = [randn(r, &[1, 2, 3, 4])];
        let shape = [randn(r, &[2, 3, 4]), randn(r, &[2, 2, 4]), randn(r, &[4])];
        let ce = [randn(r, &[2, 4, 3, 3])];
        let labels: Vec<u8> = (0..18).map(|i| (i * 7 % 4) as u8).collect();

        self.op("matmul", &mm, |t, x| t.matmul(&x[0], &x[1]))?;
        self.op("bmm", &bmm, |t, x| t.bmm(&x[0], &x[1], true))?;
        self.op("linear", &lin, |t, x| t.linear(&x[0], &x[1], Some(&x[2])))?;
        self.op("conv2d", &conv, |t, x| {
            t.conv2d(&x[0], &x[1], Some(&x[2]), 2, 1)
        })?;
        self.op("conv_transpose2d", &convt, |t, x| {
            t.conv_transpose2d(&x[0], &x[1], Some(&x[2]), 2, 0)
        })?;
        self.op("max_pool2d", &pool, |t, x| t.max_pool2d(&x[0], 3, 2, 1))?;
        self.op("layer_norm", &ln, |t, x| {
            t.layer_norm(&x[0], &x[1], &x[2], 1e-6)
        })?;
        self.op("group_norm", &gn, |t, x| {
            t.group_norm(&x[0], 2, &x[1], &x[2], 1e-5)
        })?;
        self.op("softmax", &soft, |t, x| t.softmax(&x[0], 1))?;
        self.op("gelu", &act, |t, x| t.gelu(&x[0]))?;
        self.op("relu", &act, |t, x| t.relu(&x[0]))?;
        self.op("bilinear_sample", &bil, |t, x| {
            t.bilinear_sample(&x[0], &x[1])
        })?;
        self.op("resize_bilinear", &up, |t, x| {
            t.resize_bilinear(&x[0], 7, 5)
        })?;
        self.op("shape and broadcast", &shape, |t, x| {
            let a = t.narrow(&x[0], 1, 1, 2)?;
            let c = t.concat(&[&x[1], &a], 1)?;
            let p = t.permute(&c, &[2, 0, 1])?;
            let p = t.permute(&p, &[1, 2, 0])?;
            t.mul_trailing(&t.add_trailing(&p, &x[2])?, &x[2])
        })?;
        self.op("cross_entropy", &ce, |t, x| t.cross_entropy(&x[0], &labels))?;

        let r = &mut self.rng;
        let layout = ScaleLayout::new(&[(2, 2), (1, 1)])?;
        let (b, tq, m, k, d) = (2, 4, 2, 4, 4);
        let refs = Tensor::from_fn(&[tq, 2], |_| r.gen_range(0.0..1.0));
        let logits = randn(r, &[b * tq * m, 2 * k]);
        let mut w = Vec::new();
        for row in logits.data().chunks(2 * k) {
            let z: f64 = row.iter().map(|v| libm::exp(*v)).sum();
            w.extend(row.iter().map(|v| libm::exp(*v) / z));
        }
        let deform = [
            randn(r, &[b, layout.total, d]),
            randn(r, &[b, tq, m, 2, k, 2]).map(|v| 1.5 * v),
            Tensor::new(&[b, tq, m, 2, k], w)?,
        ];
        self.op("ms_deform_core", &deform, |t, x| {
            Ok(t.ms_deform_core(&x[0], &layout, &refs, &x[1], &x[2], m)?.0)
        })
    }

    fn layers(&mut self) -> Result<()> {
        let mut s = ParamStore::new();
        let mut rng = component_rng(1, "verify-layers");
        let (lin, ln, gn, conv, up) = {
            let mut init = Init::new(&mut s, &mut rng, "m");
            (
                Linear::new(&mut init.scope("lin"), 5, 3),
                LayerNorm::new(&mut init.scope("ln"), 3, 1e-6),
                GroupNorm::new(&mut init.scope("gn"), 4, 2),
                Conv2d::new(&mut init.scope("conv"), 2, 4, 3, 2, 1, true),
                ConvTranspose2d::new(&mut init.scope("up"), 4, 3, 2, 2),
            )
        };
        jitter(&mut s, &mut self.rng, 0.3)?;
        let x = randn(&mut self.rng, &[2, 4, 5]);
        let img = randn(&mut self.rng, &[1, 2, 6, 6]);
        self.params("Linear, LayerNorm", OP_TOLERANCE, &s, None, |ctx| {
            ln.forward(ctx, &lin.forward(ctx, &x)?)
        })?;
        self.params(
            "Conv2d, GroupNorm, ConvTranspose2d",
            OP_TOLERANCE,
            &s,
            None,
            |ctx| up.forward(ctx, &gn.forward(ctx, &conv.forward(ctx, &img)?)?),
        )
    }

    fn modules(&mut self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.embed_dim;
        for (name, mode) in [
            ("encoder layer (global)", AttnMode::Global),
            ("encoder layer (window)", AttnMode::Window(2)),
        ] {
            let mut s = ParamStore::new();
            let mut rng = component_rng(0, "verify-encoder");
            let layer = EncoderLayer::new(&mut Init::new(&mut s, &mut rng, "l"), cfg, mode);
            jitter(&mut s, &mut self.rng, 0.05)?;
            let x = randn(&mut self.rng, &[1, 16, d]);
            self.params(name, MODULE_TOLERANCE, &s, Some(6), |ctx| {
                layer.forward(ctx, &x, (4, 4))
            })?;
        }

        let layout = ScaleLayout::new(&[(4, 4), (2, 2), (1, 1)])?;
        let mut s = ParamStore::new();
        let mut rng = component_rng(2, "verify-attn");
        let (deform, global) = {
            let mut init = Init::new(&mut s, &mut rng, "a");
            (
                DeformAttn::new(&mut init.scope("d"), 8, 8, 2, 3, 4, false),
                GlobalAttn::new(&mut init.scope("g"), 8, 8, 2, false),
            )
        };
        jitter(&mut s, &mut self.rng, 0.1)?;
        let q = randn(&mut self.rng, &[1, 5, 8]);
        let v = randn(&mut self.rng, &[1, layout.total, 8]);
        let refs = Tensor::from_fn(&[5, 2], |_| self.rng.gen_range(0.1..0.9));
        self.params(
            "deformable attention",
            MODULE_TOLERANCE,
            &s,
            Some(8),
            |ctx| deform.forward(ctx, &q, &refs, &v, &layout),
        )?;
        self.params("global attention", MODULE_TOLERANCE, &s, Some(8), |ctx| {
            Ok(global.attend(ctx, &q, &v)?.0)
        })?;

        let sp_layout = ScaleLayout::for_image(64, 64)?;
        for kind in [AttentionKind::Deformable, AttentionKind::Global] {
            let mut c = cfg.clone();
            c.attention = kind;
            let mut s = ParamStore::new();
            let mut rng = component_rng(3, "verify-interaction");
            let (inj, ext) = {
                let mut init = Init::new(&mut s, &mut rng, "i");
                (
                    Injector::new(&mut init.scope("inj"), &c, 3),
                    Extractor::new(&mut init.scope("ext"), &c),
                )
            };
            jitter(&mut s, &mut self.rng, 0.05)?;
            let st = InteractionState {
                f_vit: randn(&mut self.rng, &[1, 16, d]),
                f_sp: randn(&mut self.rng, &[1, sp_layout.total, d]),
                vit_grid: (4, 4),
                sp_layout: sp_layout.clone(),
                block: 0,
            };
            let (vr, sr, vl) = (
                reference_points((4, 4)),
                layout_reference_points(&sp_layout),
                st.vit_layout(),
            );
            let tag = if kind == AttentionKind::Deformable {
                "deformable"
            } else {
                "global"
            };
            self.params(
                &format!("injector ({tag})"),
                MODULE_TOLERANCE,
                &s,
                Some(4),
                |ctx| inj.forward(ctx, &st, &vr),
            )?;
            self.params(
                &format!("extractor ({tag})"),
                MODULE_TOLERANCE,
                &s,
                Some(4),
                |ctx| ext.forward(ctx, &st.f_sp, &sr, &st.f_vit, &vl),
            )?;
        }

        let mut s = ParamStore::new();
        let mut rng = component_rng(4, "verify-spm");
        let spm = SpatialPrior::new(&mut Init::new(&mut s, &mut rng, "spm"), cfg);
        jitter(&mut s, &mut self.rng, 0.05)?;
        let img = randn(&mut self.rng, &[1, 3, 64, 64]);
        self.params(
            "spatial prior module",
            MODULE_TOLERANCE,
            &s,
            Some(4),
            |ctx| Ok(spm.forward(ctx, &img)?.0),
        )
    }

    fn model(&mut self, cfg: &ModelConfig, seed: u64) -> Result<()> {
        let mut m = AdapterModel::<f64>::new(cfg, seed)?;
        jitter(&mut m.params, &mut self.rng, 0.05)?;
        let img = randn(&mut self.rng, &[1, 3, 64, 64]);
        let net = &m.net;
        self.params("full model", MODULE_TOLERANCE, &m.params, Some(2), |ctx| {
            let p = net.forward(ctx, &img)?;
            let parts: Vec<Tensor<f64>> = p
                .maps
                .iter()
                .map(|map| weighted_sum(ctx.tape, map))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            ctx.tape.add_n(&refs)
        })
    }
}

/// Runs every check in f64. `cfg` sizes the modules and the full model and
/// should be small (the micro preset); images are 64×64.
pub fn gradient_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<CaseReport>> {
    cfg.validate()?;
    let mut suite = Suite {
        rng: component_rng(seed, "gradient-suite"),
        cases: Vec::new(),
    };
    suite.kernels()?;
    suite.layers()?;
    suite.modules(cfg)?;
    suite.model(cfg, seed)?;
    Ok(suite.cases)
}
