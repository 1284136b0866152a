//! Full ViT-Adapter assembly, the plain ViT baseline, pyramid output and
//! parameter accounting.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{tokens_to_map, Backbone};
use crate::config::{Fusion, InteractionMode, ModelConfig, StackMode};
use crate::deform::{layout_reference_points, reference_points};
use crate::error::{shape_err, Result};
use crate::interaction::{inject_add, Extractor, Injector, InteractionState};
use crate::nn::{component_rng, ConvTranspose2d, Ctx, GroupNorm, Init, ParamStore};
use crate::real::Real;
use crate::spm::{split_levels, SpatialPrior};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const BACKBONE_PREFIX: &str = "backbone";
pub const ADAPTER_PREFIX: &str = "adapter";
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Output maps at strides 4, 8, 16 and 32, each `[B, D, H/s, W/s]`.
#[derive(Clone)]
pub struct Pyramid<T> {
    pub maps: [Tensor<T>; 4],
}

impl<T: Real> Pyramid<T> {
    pub fn stride(&self, s: usize) -> Option<&Tensor<T>> {
        PYRAMID_STRIDES
            .iter()
            .position(|&p| p == s)
            .map(|i| &self.maps[i])
    }

    /// `"P4 16x16, P8 8x8, P16 4x4, P32 2x2"`
    pub fn describe(&self) -> alloc::string::String {
        let parts: Vec<_> = PYRAMID_STRIDES
            .iter()
            .zip(&self.maps)
            .map(|(s, m)| format!("P{s} {}x{}", m.dims()[2], m.dims()[3]))
            .collect();
        parts.join(", ")
    }
}

/// ViT tokens after every block, the pyramid, and the final spatial stream.
pub struct ForwardTrace<T> {
    pub blocks: Vec<Tensor<T>>,
    pub pyramid: Pyramid<T>,
    pub f_sp: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub adapter: usize,
    pub total: usize,
}

pub fn count_parameters<T: Real>(params: &ParamStore<T>) -> ParamCounts {
    let backbone = params.numel_with_prefix(&format!("{BACKBONE_PREFIX}."));
    let adapter = params.numel_with_prefix(&format!("{ADAPTER_PREFIX}."));
    ParamCounts {
        backbone,
        adapter,
        total: backbone + adapter,
    }
}

fn backbone_in<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Backbone {
    let mut rng = component_rng(seed, BACKBONE_PREFIX);
    Backbone::new(&mut Init::new(store, &mut rng, BACKBONE_PREFIX), cfg)
}

/// Adapter network; parameters live in an external store.
#[derive(Clone, Debug)]
pub struct ViTAdapter {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub spm: SpatialPrior,
    pub injectors: Vec<Injector>,
    pub extractors: Vec<Extractor>,
    /// Extractors stacked after the last one.
    pub extra_extractors: Vec<Extractor>,
    pub up: ConvTranspose2d,
    pub up_norm: GroupNorm,
}

impl ViTAdapter {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = backbone_in(store, cfg, seed);
        let mut rng = component_rng(seed, ADAPTER_PREFIX);
        let mut init = Init::new(store, &mut rng, ADAPTER_PREFIX);
        let spm = SpatialPrior::new(&mut init.scope("spm"), cfg);
        let (mut injectors, mut extractors, mut extra_extractors) =
            (Vec::new(), Vec::new(), Vec::new());
        if cfg.mode == InteractionMode::Attention {
            for i in 0..cfg.interactions {
                injectors.push(Injector::new(
                    &mut init.scope(&format!("injectors.{i}")),
                    cfg,
                    3,
                ));
            }
            for i in 0..cfg.interactions {
                extractors.push(Extractor::new(
                    &mut init.scope(&format!("extractors.{i}")),
                    cfg,
                ));
            }
            for i in 0..cfg.extractor_stack - 1 {
                extra_extractors.push(Extractor::new(
                    &mut init.scope(&format!("extra_extractors.{i}")),
                    cfg,
                ));
            }
        }
        let d = cfg.embed_dim;
        let up = ConvTranspose2d::new(&mut init.scope("up"), d, d, 2, 2);
        let up_norm = GroupNorm::new(&mut init.scope("up_norm"), d, 1);
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            spm,
            injectors,
            extractors,
            extra_extractors,
            up,
            up_norm,
        })
    }

    pub fn forward_trace<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        image: &Tensor<T>,
    ) -> Result<ForwardTrace<T>> {
        let t = ctx.tape;
        let cfg = &self.cfg;
        let n = cfg.interactions;
        let (f_vit, grid) = self.backbone.embed(ctx, image)?;
        let (f_sp, layout) = self.spm.forward(ctx, image)?;
        if layout.levels[1] != grid {
            return Err(shape_err!(
                "ViT grid {grid:?} differs from the stride-16 level {:?}",
                layout.levels[1]
            ));
        }
        let vit_refs = reference_points::<T>(grid);
        let sp_refs = layout_reference_points::<T>(&layout);
        let mut s = InteractionState {
            f_vit,
            f_sp,
            vit_grid: grid,
            sp_layout: layout,
            block: 0,
        };
        let vit_layout = s.vit_layout();
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            s.block = i;
            match cfg.mode {
                InteractionMode::Attention => {
                    s.f_vit = self.injectors[i].forward(ctx, &s, &vit_refs)?
                }
                InteractionMode::Add => s.f_vit = inject_add(t, &s)?,
                InteractionMode::None => {}
            }
            s.f_vit = self.backbone.run_block(ctx, s.f_vit, grid, i, n)?;
            blocks.push(s.f_vit.clone());
            if cfg.mode == InteractionMode::Attention {
                s.f_sp =
                    self.extractors[i].forward(ctx, &s.f_sp, &sp_refs, &s.f_vit, &vit_layout)?;
                if i + 1 == n {
                    s.f_sp = self.stack_extra(ctx, s.f_sp, &sp_refs, &s.f_vit, &vit_layout)?;
                }
            }
        }
        let pyramid = self.pyramid(ctx, &s)?;
        Ok(ForwardTrace {
            blocks,
            pyramid,
            f_sp: s.f_sp,
        })
    }

    fn stack_extra<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        f_sp: Tensor<T>,
        refs: &Tensor<T>,
        f_vit: &Tensor<T>,
        vit_layout: &crate::spm::ScaleLayout,
    ) -> Result<Tensor<T>> {
        let t = ctx.tape;
        match self.cfg.stack_mode {
            StackMode::Sequential => {
                let mut x = f_sp;
                for e in &self.extra_extractors {
                    x = e.forward(ctx, &x, refs, f_vit, vit_layout)?;
                }
                Ok(x)
            }
            StackMode::ParallelSum => {
                let mut out = f_sp.clone();
                for e in &self.extra_extractors {
                    let y = e.forward(ctx, &f_sp, refs, f_vit, vit_layout)?;
                    out = t.add(&out, &t.sub(&y, &f_sp)?)?;
                }
                Ok(out)
            }
        }
    }

    fn pyramid<T: Real>(&self, ctx: &Ctx<'_, T>, s: &InteractionState<T>) -> Result<Pyramid<T>> {
        let t = ctx.tape;
        let mut levels = split_levels(t, &s.f_sp, &s.sp_layout)?;
        if self.cfg.fusion == Fusion::Add {
            levels[1] = t.add(&levels[1], &tokens_to_map(t, &s.f_vit, s.vit_grid)?)?;
        }
        let p4 = self
            .up_norm
            .forward(ctx, &self.up.forward(ctx, &levels[0])?)?;
        let [p8, p16, p32]: [Tensor<T>; 3] = levels
            .try_into()
            .map_err(|_| shape_err!("expected three levels"))?;
        Ok(Pyramid {
            maps: [p4, p8, p16, p32],
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, image: &Tensor<T>) -> Result<Pyramid<T>> {
        Ok(self.forward_trace(ctx, image)?.pyramid)
    }
}

/// Plain ViT; shares the backbone initialization of a same-seed adapter.
#[derive(Clone, Debug)]
pub struct PlainVit {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
}

impl PlainVit {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone: backbone_in(store, cfg, seed),
        })
    }

    /// Tokens after each of the N blocks and the token grid.
    pub fn forward_blocks<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        image: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, (usize, usize))> {
        self.backbone
            .forward_blocks(ctx, image, self.cfg.interactions)
    }

    /// Final tokens as a `[B, D, H/16, W/16]` map.
    pub fn forward_map<T: Real>(&self, ctx: &Ctx<'_, T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (blocks, grid) = self.forward_blocks(ctx, image)?;
        let last = blocks.last().ok_or_else(|| shape_err!("no blocks"))?;
        tokens_to_map(ctx.tape, last, grid)
    }
}

/// An adapter network bundled with its parameters.
pub struct AdapterModel<T> {
    pub net: ViTAdapter,
    pub params: ParamStore<T>,
}

impl<T: Real> AdapterModel<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = ViTAdapter::register(&mut params, cfg, seed)?;
        Ok(Self { net, params })
    }

    pub fn forward(&self, tape: &Tape<T>, image: &Tensor<T>) -> Result<Pyramid<T>> {
        self.net.forward(&Ctx::new(tape, &self.params), image)
    }

    pub fn forward_trace(&self, tape: &Tape<T>, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.net.forward_trace(&Ctx::new(tape, &self.params), image)
    }

    pub fn count_parameters(&self) -> ParamCounts {
        count_parameters(&self.params)
    }
}

/// A plain ViT bundled with its parameters.
pub struct PlainVitModel<T> {
    pub net: PlainVit,
    pub params: ParamStore<T>,
}

impl<T: Real> PlainVitModel<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = PlainVit::register(&mut params, cfg, seed)?;
        Ok(Self { net, params })
    }

    pub fn forward_blocks(&self, tape: &Tape<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self
            .net
            .forward_blocks(&Ctx::new(tape, &self.params), image)?
            .0)
    }
}
