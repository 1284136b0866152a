//! Plain ViT: patch embedding, learned position embedding and pre-norm
//! encoder layers with windowed or global self-attention.

use alloc::vec::Vec;
use core::ops::Range;

use crate::attention::dot_product_attention;
use crate::config::ModelConfig;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Conv2d, Ctx, Init, LayerNorm, Linear, ParamId};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    Global,
    Window(usize),
}

/// `[B, h·w, C] -> [B·(h/ws)·(w/ws), ws·ws, C]`
pub fn window_partition<T: Real>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    grid: (usize, usize),
    ws: usize,
) -> Result<Tensor<T>> {
    let (h, w) = grid;
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(shape_err!("grid {h}x{w} is not divisible by window {ws}"));
    }
    let (b, c) = (x.dims()[0], x.dims()[2]);
    let r = tape.reshape(x, &[b, h / ws, ws, w / ws, ws, c])?;
    let p = tape.permute(&r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(&p, &[b * (h / ws) * (w / ws), ws * ws, c])
}

/// Inverse of [`window_partition`].
pub fn window_unpartition<T: Real>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    batch: usize,
    grid: (usize, usize),
    ws: usize,
) -> Result<Tensor<T>> {
    let (h, w) = grid;
    let c = x.dims()[2];
    let r = tape.reshape(x, &[batch, h / ws, w / ws, ws, ws, c])?;
    let p = tape.permute(&r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(&p, &[batch, h * w, c])
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub mode: AttnMode,
}

impl EncoderLayer {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, mode: AttnMode) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(&mut init.scope("norm1"), d, cfg.ln_eps),
            qkv: Linear::new(&mut init.scope("attn.qkv"), d, 3 * d),
            proj: Linear::new(&mut init.scope("attn.proj"), d, d),
            norm2: LayerNorm::new(&mut init.scope("norm2"), d, cfg.ln_eps),
            fc1: Linear::new(&mut init.scope("mlp.fc1"), d, cfg.ffn_dim),
            fc2: Linear::new(&mut init.scope("mlp.fc2"), cfg.ffn_dim, d),
            heads: cfg.heads,
            mode,
        }
    }

    /// Multi-head self-attention on `[N, T, D]`, returning the output before
    /// the output projection and the attention probabilities.
    pub fn self_attention<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let t = ctx.tape;
        let d = x.dims()[2];
        let qkv = self.qkv.forward(ctx, x)?;
        let q = t.narrow(&qkv, 2, 0, d)?;
        let k = t.narrow(&qkv, 2, d, d)?;
        let v = t.narrow(&qkv, 2, 2 * d, d)?;
        dot_product_attention(t, &q, &k, &v, self.heads)
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &Tensor<T>,
        grid: (usize, usize),
    ) -> Result<Tensor<T>> {
        let t = ctx.tape;
        if x.rank() != 3 || x.dims()[1] != grid.0 * grid.1 {
            return Err(shape_err!(
                "tokens {:?} do not match grid {grid:?}",
                x.dims()
            ));
        }
        let b = x.dims()[0];
        let y = self.norm1.forward(ctx, x)?;
        let a = match self.mode {
            AttnMode::Global => self.self_attention(ctx, &y)?.0,
            AttnMode::Window(ws) => {
                let parts = window_partition(t, &y, grid, ws)?;
                let a = self.self_attention(ctx, &parts)?.0;
                window_unpartition(t, &a, b, grid, ws)?
            }
        };
        let x = t.add(x, &self.proj.forward(ctx, &a)?)?;
        let y = self.norm2.forward(ctx, &x)?;
        let y = t.gelu(&self.fc1.forward(ctx, &y)?)?;
        t.add(&x, &self.fc2.forward(ctx, &y)?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Conv2d,
    pub pos_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub pos_grid: (usize, usize),
}

impl Backbone {
    /// Parameters are registered under the scope of `init`.
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        let patch_embed = Conv2d::new(
            &mut init.scope("patch_embed"),
            cfg.in_channels,
            d,
            p,
            p,
            0,
            true,
        );
        let pos_embed = init.normal("pos_embed", &[cfg.pos_grid.0 * cfg.pos_grid.1, d], 0.02);
        let layers = (0..cfg.layers)
            .map(|i| {
                let mode = if cfg.is_global(i) {
                    AttnMode::Global
                } else {
                    AttnMode::Window(cfg.window_size)
                };
                EncoderLayer::new(&mut init.scope(&alloc::format!("blocks.{i}")), cfg, mode)
            })
            .collect();
        Self {
            patch_embed,
            pos_embed,
            layers,
            patch_size: p,
            embed_dim: d,
            pos_grid: cfg.pos_grid,
        }
    }

    /// `[B, C, H, W] -> ([B, (H/p)(W/p), D], (H/p, W/p))`
    pub fn patch_embed<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        image: &Tensor<T>,
    ) -> Result<(Tensor<T>, (usize, usize))> {
        let p = self.patch_size;
        let d = image.dims();
        if d.len() != 4 || !d[2].is_multiple_of(p) || !d[3].is_multiple_of(p) {
            return Err(shape_err!(
                "image {:?} is not divisible into {p}x{p} patches",
                d
            ));
        }
        let t = ctx.tape;
        let f = self.patch_embed.forward(ctx, image)?;
        let (b, c, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2], f.dims()[3]);
        let f = t.permute(&f, &[0, 2, 3, 1])?;
        Ok((t.reshape(&f, &[b, h * w, c])?, (h, w)))
    }

    /// Position embedding for `grid`, bilinearly resized from the stored grid when they differ.
    pub fn position_embedding<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        grid: (usize, usize),
    ) -> Result<Tensor<T>> {
        resize_position_embedding(ctx.tape, &ctx.p(self.pos_embed), self.pos_grid, grid)
    }

    pub fn embed<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        image: &Tensor<T>,
    ) -> Result<(Tensor<T>, (usize, usize))> {
        let (x, grid) = self.patch_embed(ctx, image)?;
        let pos = self.position_embedding(ctx, grid)?;
        Ok((ctx.tape.add_trailing(&x, &pos)?, grid))
    }

    pub fn run_layers<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        mut x: Tensor<T>,
        grid: (usize, usize),
        range: Range<usize>,
    ) -> Result<Tensor<T>> {
        for layer in &self.layers[range] {
            x = layer.forward(ctx, &x, grid)?;
        }
        Ok(x)
    }

    /// Layers of block `i` when the encoder is split into `n` equal blocks.
    pub fn block_range(&self, i: usize, n: usize) -> Result<Range<usize>> {
        let l = self.layers.len();
        if n == 0 || !l.is_multiple_of(n) {
            return Err(config_err!("L={l} is not divisible by N={n}"));
        }
        if i >= n {
            return Err(config_err!("block {i} out of range for N={n}"));
        }
        Ok(i * l / n..(i + 1) * l / n)
    }

    pub fn run_block<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        x: Tensor<T>,
        grid: (usize, usize),
        i: usize,
        n: usize,
    ) -> Result<Tensor<T>> {
        let r = self.block_range(i, n)?;
        self.run_layers(ctx, x, grid, r)
    }

    /// Tokens after each of `n` blocks; the last entry is the final output.
    pub fn forward_blocks<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        image: &Tensor<T>,
        n: usize,
    ) -> Result<(Vec<Tensor<T>>, (usize, usize))> {
        let (mut x, grid) = self.embed(ctx, image)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            x = self.run_block(ctx, x, grid, i, n)?;
            out.push(x.clone());
        }
        Ok((out, grid))
    }
}

/// `pos [h0·w0, D]` resized to `grid` and flattened back to `[h·w, D]`.
pub fn resize_position_embedding<T: Real>(
    tape: &Tape<T>,
    pos: &Tensor<T>,
    base: (usize, usize),
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    if grid == base {
        return Ok(pos.clone());
    }
    let d = pos.dims()[1];
    let p = tape.reshape(pos, &[1, base.0, base.1, d])?;
    let p = tape.permute(&p, &[0, 3, 1, 2])?;
    let p = tape.resize_bilinear(&p, grid.0, grid.1)?;
    let p = tape.permute(&p, &[0, 2, 3, 1])?;
    tape.reshape(&p, &[grid.0 * grid.1, d])
}

/// `[B, h·w, D] -> [B, D, h, w]`
pub fn tokens_to_map<T: Real>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    let (b, d) = (x.dims()[0], x.dims()[2]);
    let r = tape.reshape(x, &[b, grid.0, grid.1, d])?;
    tape.permute(&r, &[0, 3, 1, 2])
}

/// `[B, D, h, w] -> [B, h·w, D]`
pub fn map_to_tokens<T: Real>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    let p = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(&p, &[d[0], d[2] * d[3], d[1]])
}
