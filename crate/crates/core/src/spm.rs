//! Spatial prior module: a convolutional stem and a stride-2 tower giving
//! D-channel maps at strides 8, 16 and 32, flattened into one token axis.

use alloc::vec::Vec;

use crate::backbone::{map_to_tokens, tokens_to_map};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, Ctx, GroupNorm, Init};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const SPM_STRIDES: [usize; 3] = [8, 16, 32];

/// Token grids of the flattened levels and their offsets on the token axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleLayout {
    pub levels: Vec<(usize, usize)>,
    /// Exclusive prefix sums of the level sizes.
    pub starts: Vec<usize>,
    pub total: usize,
}

impl ScaleLayout {
    pub fn new(levels: &[(usize, usize)]) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(shape_err!("invalid level grids {levels:?}"));
        }
        let mut starts = Vec::with_capacity(levels.len());
        let mut total = 0;
        for &(h, w) in levels {
            starts.push(total);
            total += h * w;
        }
        Ok(Self {
            levels: levels.to_vec(),
            starts,
            total,
        })
    }

    /// Strides 8, 16 and 32 of an `h x w` image.
    pub fn for_image(h: usize, w: usize) -> Result<Self> {
        if !h.is_multiple_of(32) || !w.is_multiple_of(32) || h == 0 || w == 0 {
            return Err(shape_err!("image {h}x{w} is not divisible by 32"));
        }
        Self::new(&SPM_STRIDES.map(|s| (h / s, w / s)))
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn size(&self, level: usize) -> usize {
        self.levels[level].0 * self.levels[level].1
    }

    /// `(level, row, col)` of a flattened token index.
    pub fn locate(&self, index: usize) -> Option<(usize, usize, usize)> {
        let l = (0..self.len()).rev().find(|&l| self.starts[l] <= index)?;
        let r = index - self.starts[l];
        let w = self.levels[l].1;
        (r < self.size(l)).then_some((l, r / w, r % w))
    }
}

/// `[B, D, h, w]` maps flattened row-major and concatenated in order.
pub fn flatten_levels<T: Real>(
    tape: &Tape<T>,
    maps: &[Tensor<T>],
) -> Result<(Tensor<T>, ScaleLayout)> {
    let grids: Vec<(usize, usize)> = maps.iter().map(|m| (m.dims()[2], m.dims()[3])).collect();
    let layout = ScaleLayout::new(&grids)?;
    let tokens = maps
        .iter()
        .map(|m| map_to_tokens(tape, m))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = tokens.iter().collect();
    Ok((tape.concat(&refs, 1)?, layout))
}

/// Inverse of [`flatten_levels`].
pub fn split_levels<T: Real>(
    tape: &Tape<T>,
    tokens: &Tensor<T>,
    layout: &ScaleLayout,
) -> Result<Vec<Tensor<T>>> {
    if tokens.rank() != 3 || tokens.dims()[1] != layout.total {
        return Err(shape_err!(
            "tokens {:?} do not match layout total {}",
            tokens.dims(),
            layout.total
        ));
    }
    (0..layout.len())
        .map(|l| {
            let part = tape.narrow(tokens, 1, layout.starts[l], layout.size(l))?;
            tokens_to_map(tape, &part, layout.levels[l])
        })
        .collect()
}

/// Convolution without bias, single-group normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut init.scope("conv"), cin, cout, 3, stride, 1, false),
            norm: GroupNorm::new(&mut init.scope("norm"), cout, 1),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, &y)?;
        ctx.tape.relu(&y)
    }
}

#[derive(Clone, Debug)]
pub struct SpatialPrior {
    pub stem: [ConvBlock; 3],
    /// Stride-2 tower producing strides 8, 16, 32.
    pub tower: [ConvBlock; 3],
    /// 1x1 projections to D.
    pub proj: [Conv2d; 3],
}

impl SpatialPrior {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let c0 = cfg.spm.stem_channels;
        let [c1, c2, c3] = cfg.spm.level_channels;
        let cin = cfg.in_channels;
        let stem = [
            ConvBlock::new(&mut init.scope("stem.0"), cin, c0, 2),
            ConvBlock::new(&mut init.scope("stem.1"), c0, c0, 1),
            ConvBlock::new(&mut init.scope("stem.2"), c0, c0, 1),
        ];
        let tower = [
            ConvBlock::new(&mut init.scope("tower.0"), c0, c1, 2),
            ConvBlock::new(&mut init.scope("tower.1"), c1, c2, 2),
            ConvBlock::new(&mut init.scope("tower.2"), c2, c3, 2),
        ];
        let d = cfg.embed_dim;
        let proj = [
            Conv2d::new(&mut init.scope("proj.0"), c1, d, 1, 1, 0, true),
            Conv2d::new(&mut init.scope("proj.1"), c2, d, 1, 1, 0, true),
            Conv2d::new(&mut init.scope("proj.2"), c3, d, 1, 1, 0, true),
        ];
        Self { stem, tower, proj }
    }

    /// Projected `[B, D, H/s, W/s]` maps for s = 8, 16, 32.
    pub fn levels<T: Real>(&self, ctx: &Ctx<'_, T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let d = image.dims();
        if d.len() != 4 || !d[2].is_multiple_of(32) || !d[3].is_multiple_of(32) {
            return Err(shape_err!(
                "image {:?} must have extents divisible by 32",
                d
            ));
        }
        let mut x = image.clone();
        for b in &self.stem {
            x = b.forward(ctx, &x)?;
        }
        x = ctx.tape.max_pool2d(&x, 3, 2, 1)?;
        let mut out = Vec::with_capacity(3);
        for (b, p) in self.tower.iter().zip(&self.proj) {
            x = b.forward(ctx, &x)?;
            out.push(p.forward(ctx, &x)?);
        }
        Ok(out)
    }

    /// F_sp `[B, T_sp, D]` with its layout.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        image: &Tensor<T>,
    ) -> Result<(Tensor<T>, ScaleLayout)> {
        let maps = self.levels(ctx, image)?;
        flatten_levels(ctx.tape, &maps)
    }
}
