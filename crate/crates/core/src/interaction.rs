//! Spatial feature injector, multi-scale feature extractor and the
//! resize-and-add injection used by the "Add" interaction mode.

use alloc::vec::Vec;

use crate::backbone::map_to_tokens;
use crate::config::ModelConfig;
use crate::deform::CrossAttention;
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, ParamId};
use crate::real::Real;
use crate::spm::{split_levels, ScaleLayout};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// The two streams threaded through the interaction blocks.
#[derive(Clone)]
pub struct InteractionState<T> {
    pub f_vit: Tensor<T>,
    pub f_sp: Tensor<T>,
    pub vit_grid: (usize, usize),
    pub sp_layout: ScaleLayout,
    pub block: usize,
}

impl<T: Real> InteractionState<T> {
    pub fn check(&self) -> Result<()> {
        let (v, s) = (self.f_vit.dims(), self.f_sp.dims());
        if v.len() != 3 || v[1] != self.vit_grid.0 * self.vit_grid.1 {
            return Err(shape_err!(
                "F_vit {:?} does not match grid {:?}",
                v,
                self.vit_grid
            ));
        }
        if s.len() != 3 || s[1] != self.sp_layout.total || s[0] != v[0] || s[2] != v[2] {
            return Err(shape_err!(
                "F_sp {:?} does not match layout total {} / F_vit {:?}",
                s,
                self.sp_layout.total,
                v
            ));
        }
        Ok(())
    }

    pub fn vit_layout(&self) -> ScaleLayout {
        ScaleLayout {
            levels: alloc::vec![self.vit_grid],
            starts: alloc::vec![0],
            total: self.f_vit.dims()[1],
        }
    }
}

/// F_vit + γ ⊙ Attention(norm(F_vit), norm(F_sp)).
#[derive(Clone, Debug)]
pub struct Injector {
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: CrossAttention,
    pub gamma: ParamId,
}

impl Injector {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, levels: usize) -> Self {
        let d = cfg.embed_dim;
        Self {
            query_norm: LayerNorm::new(&mut init.scope("query_norm"), d, cfg.ln_eps),
            feat_norm: LayerNorm::new(&mut init.scope("feat_norm"), d, cfg.ln_eps),
            attn: CrossAttention::new(&mut init.scope("attn"), cfg, levels, false),
            gamma: init.zeros("gamma", &[d]),
        }
    }

    /// Attention(norm(F_vit), norm(F_sp)) before gating.
    pub fn attention<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        s: &InteractionState<T>,
        refs: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let q = self.query_norm.forward(ctx, &s.f_vit)?;
        let f = self.feat_norm.forward(ctx, &s.f_sp)?;
        self.attn.forward(ctx, &q, refs, &f, &s.sp_layout)
    }

    /// `refs` are the reference points of the ViT grid.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        s: &InteractionState<T>,
        refs: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        s.check()?;
        let a = self.attention(ctx, s, refs)?;
        let gated = ctx.tape.mul_trailing(&a, &ctx.p(self.gamma))?;
        ctx.tape.add(&s.f_vit, &gated)
    }
}

/// F̂ = F_sp + Attention(norm(F_sp), norm(F_vit)); F̂ + FFN(norm(F̂)).
#[derive(Clone, Debug)]
pub struct Extractor {
    pub query_norm: LayerNorm,
    pub feat_norm: LayerNorm,
    pub attn: CrossAttention,
    pub ffn_norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Extractor {
    /// Residual branches start at zero so a fresh extractor is the identity.
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            query_norm: LayerNorm::new(&mut init.scope("query_norm"), d, cfg.ln_eps),
            feat_norm: LayerNorm::new(&mut init.scope("feat_norm"), d, cfg.ln_eps),
            attn: CrossAttention::new(&mut init.scope("attn"), cfg, 1, true),
            ffn_norm: LayerNorm::new(&mut init.scope("ffn_norm"), d, cfg.ln_eps),
            fc1: Linear::new(&mut init.scope("ffn.fc1"), d, cfg.adapter_ffn),
            fc2: Linear::zeroed(&mut init.scope("ffn.fc2"), cfg.adapter_ffn, d),
        }
    }

    /// Attention(norm(F_sp), norm(F_vit)) on the single-level ViT stream.
    pub fn attention<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        f_sp: &Tensor<T>,
        refs: &Tensor<T>,
        f_vit: &Tensor<T>,
        vit_layout: &ScaleLayout,
    ) -> Result<Tensor<T>> {
        let q = self.query_norm.forward(ctx, f_sp)?;
        let f = self.feat_norm.forward(ctx, f_vit)?;
        self.attn.forward(ctx, &q, refs, &f, vit_layout)
    }

    pub fn ffn<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.ffn_norm.forward(ctx, x)?;
        let y = ctx.tape.gelu(&self.fc1.forward(ctx, &y)?)?;
        self.fc2.forward(ctx, &y)
    }

    /// `refs` are the reference points of the spatial layout.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        f_sp: &Tensor<T>,
        refs: &Tensor<T>,
        f_vit: &Tensor<T>,
        vit_layout: &ScaleLayout,
    ) -> Result<Tensor<T>> {
        let t = ctx.tape;
        let hat = t.add(f_sp, &self.attention(ctx, f_sp, refs, f_vit, vit_layout)?)?;
        t.add(&hat, &self.ffn(ctx, &hat)?)
    }
}

/// Mean of the spatial levels resized to the ViT grid, as `[B, T_vit, D]`.
pub fn resized_level_mean<T: Real>(
    tape: &Tape<T>,
    f_sp: &Tensor<T>,
    layout: &ScaleLayout,
    vit_grid: (usize, usize),
) -> Result<Tensor<T>> {
    let maps = split_levels(tape, f_sp, layout)?;
    let resized = maps
        .iter()
        .map(|m| tape.resize_bilinear(m, vit_grid.0, vit_grid.1))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = resized.iter().collect();
    let sum = tape.add_n(&refs)?;
    let mean = tape.scale(&sum, T::lit(1.0 / layout.len() as f64))?;
    map_to_tokens(tape, &mean)
}

/// Ungated F_vit + mean of the resized spatial levels.
pub fn inject_add<T: Real>(tape: &Tape<T>, s: &InteractionState<T>) -> Result<Tensor<T>> {
    s.check()?;
    let m = resized_level_mean(tape, &s.f_sp, &s.sp_layout, s.vit_grid)?;
    tape.add(&s.f_vit, &m)
}
