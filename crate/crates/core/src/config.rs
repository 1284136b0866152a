//! Model hyperparameters and the named presets.

use alloc::string::String;

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Deformable,
    Global,
}

/// How the spatial stream talks to the ViT stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InteractionMode {
    /// Injector and extractor cross-attention.
    Attention,
    /// Resize-and-add of the spatial levels before each block, no extractors.
    Add,
    /// Both streams run side by side and only meet at the output.
    None,
}

/// Composition of the extractors stacked in the last interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackMode {
    Sequential,
    ParallelSum,
}

/// Merge of the final ViT tokens into the stride-16 output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Add,
    SpOnly,
}

/// Where the global layer sits inside each interval of windowed layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalPlacement {
    BlockFinal,
    BlockInitial,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpmConfig {
    pub stem_channels: usize,
    /// Channels of the stride 8, 16 and 32 maps before projection to D.
    pub level_channels: [usize; 3],
}

impl Default for SpmConfig {
    fn default() -> Self {
        Self {
            stem_channels: 64,
            level_channels: [128, 256, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Token grid the position embedding is stored for.
    pub pos_grid: (usize, usize),
    pub window_size: usize,
    /// Every `global_interval`-th layer attends globally; 0 disables windows.
    pub global_interval: usize,
    pub global_placement: GlobalPlacement,
    pub interactions: usize,
    pub adapter_ffn: usize,
    pub adapter_heads: usize,
    pub points: usize,
    /// Width of the deformable value stream as a fraction of D.
    pub value_ratio: f64,
    pub attention: AttentionKind,
    pub mode: InteractionMode,
    pub extractor_stack: usize,
    pub stack_mode: StackMode,
    pub fusion: Fusion,
    pub spm: SpmConfig,
    pub ln_eps: f64,
}

pub const PRESET_NAMES: [&str; 5] = ["micro", "tiny", "small", "base", "large"];

/// Reference sizes in millions of parameters: (backbone, adapter).
pub fn reference_params(name: &str) -> Option<(f64, f64)> {
    match name {
        "tiny" => Some((5.5, 2.5)),
        "small" => Some((21.7, 5.8)),
        "base" => Some((85.8, 14.0)),
        "large" => Some((303.3, 23.7)),
        _ => None,
    }
}

pub const BACKBONE_TOLERANCE: f64 = 0.03;
pub const ADAPTER_TOLERANCE: f64 = 0.15;

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn table_row(
        name: &str,
        layers: usize,
        embed_dim: usize,
        ffn_dim: usize,
        heads: usize,
        adapter_ffn: usize,
        adapter_heads: usize,
        value_ratio: f64,
    ) -> Self {
        Self {
            name: name.into(),
            layers,
            embed_dim,
            ffn_dim,
            heads,
            patch_size: 16,
            in_channels: 3,
            pos_grid: (14, 14),
            window_size: 14,
            global_interval: layers / 4,
            global_placement: GlobalPlacement::BlockFinal,
            interactions: 4,
            adapter_ffn,
            adapter_heads,
            points: 4,
            value_ratio,
            attention: AttentionKind::Deformable,
            mode: InteractionMode::Attention,
            extractor_stack: 3,
            stack_mode: StackMode::Sequential,
            fusion: Fusion::Add,
            spm: SpmConfig::default(),
            ln_eps: 1e-6,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "tiny" => Self::table_row(name, 12, 192, 768, 3, 48, 6, 1.0),
            "small" => Self::table_row(name, 12, 384, 1536, 6, 96, 6, 1.0),
            "base" => Self::table_row(name, 12, 768, 3072, 12, 192, 12, 0.5),
            "large" => Self::table_row(name, 24, 1024, 4096, 16, 256, 16, 0.5),
            "micro" => {
                let mut c = Self::table_row(name, 4, 32, 128, 4, 8, 4, 1.0);
                c.pos_grid = (8, 8);
                c.window_size = 4;
                c.spm = SpmConfig {
                    stem_channels: 8,
                    level_channels: [32, 64, 64],
                };
                c
            }
            _ => {
                return Err(Error::Usage(alloc::format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, what: &str| {
            if v == 0 {
                Err(config_err!("{what} must be positive"))
            } else {
                Ok(())
            }
        };
        pos(self.layers, "layers")?;
        pos(self.embed_dim, "embed_dim")?;
        pos(self.ffn_dim, "ffn_dim")?;
        pos(self.heads, "heads")?;
        pos(self.patch_size, "patch_size")?;
        pos(self.in_channels, "in_channels")?;
        pos(self.pos_grid.0 * self.pos_grid.1, "pos_grid")?;
        pos(self.window_size, "window_size")?;
        pos(self.interactions, "interactions")?;
        pos(self.adapter_ffn, "adapter_ffn")?;
        pos(self.adapter_heads, "adapter_heads")?;
        pos(self.points, "points")?;
        pos(self.extractor_stack, "extractor_stack")?;
        pos(self.spm.stem_channels, "spm stem_channels")?;
        for c in self.spm.level_channels {
            pos(c, "spm level channels")?;
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(config_err!(
                "heads {} do not divide D={}",
                self.heads,
                self.embed_dim
            ));
        }
        if !self.layers.is_multiple_of(self.interactions) {
            return Err(config_err!(
                "L={} is not divisible by N={}",
                self.layers,
                self.interactions
            ));
        }
        if !(self.value_ratio > 0.0 && self.value_ratio <= 1.0) {
            return Err(config_err!("value_ratio must lie in (0, 1]"));
        }
        let dv = self.value_dim();
        if dv == 0 || !dv.is_multiple_of(self.adapter_heads) {
            return Err(config_err!(
                "adapter heads {} do not divide value width {dv}",
                self.adapter_heads
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(config_err!("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn layers_per_block(&self) -> usize {
        self.layers / self.interactions
    }

    /// Width of the projected value stream in cross-attention.
    pub fn value_dim(&self) -> usize {
        libm::round(self.embed_dim as f64 * self.value_ratio) as usize
    }

    pub fn is_global(&self, layer: usize) -> bool {
        let k = self.global_interval;
        if k == 0 {
            return true;
        }
        match self.global_placement {
            GlobalPlacement::BlockFinal => (layer + 1).is_multiple_of(k),
            GlobalPlacement::BlockInitial => layer.is_multiple_of(k),
        }
    }

    /// Number of extractors: one per interaction plus the extra stacked ones.
    pub fn extractor_count(&self) -> usize {
        match self.mode {
            InteractionMode::Attention => self.interactions + self.extractor_stack - 1,
            _ => 0,
        }
    }

    pub fn injector_count(&self) -> usize {
        match self.mode {
            InteractionMode::Attention => self.interactions,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let s = ModelConfig::preset("small").unwrap();
        assert_eq!(
            (s.layers, s.embed_dim, s.ffn_dim, s.heads),
            (12, 384, 1536, 6)
        );
        assert_eq!((s.interactions, s.adapter_ffn, s.adapter_heads), (4, 96, 6));
        let l = ModelConfig::preset("large").unwrap();
        assert_eq!(
            (l.layers, l.embed_dim, l.ffn_dim, l.heads),
            (24, 1024, 4096, 16)
        );
        assert_eq!(
            (l.interactions, l.adapter_ffn, l.adapter_heads),
            (4, 256, 16)
        );
        let m = ModelConfig::preset("micro").unwrap();
        assert_eq!((m.layers, m.embed_dim, m.ffn_dim, m.heads), (4, 32, 128, 4));
        assert_eq!(
            (
                m.interactions,
                m.adapter_ffn,
                m.adapter_heads,
                m.layers_per_block()
            ),
            (4, 8, 4, 1)
        );
    }

    #[test]
    fn unknown_preset_is_usage_error() {
        assert!(matches!(ModelConfig::preset("huge"), Err(Error::Usage(_))));
    }

    #[test]
    fn global_layers_at_interval() {
        let t = ModelConfig::preset("tiny").unwrap();
        let g: alloc::vec::Vec<usize> = (0..12).filter(|&i| t.is_global(i)).collect();
        assert_eq!(g, [2, 5, 8, 11]);
        let mut t2 = t.clone();
        t2.global_placement = GlobalPlacement::BlockInitial;
        let g: alloc::vec::Vec<usize> = (0..12).filter(|&i| t2.is_global(i)).collect();
        assert_eq!(g, [0, 3, 6, 9]);
    }

    #[test]
    fn indivisible_blocks_rejected() {
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.interactions = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn adapter_ffn_is_quarter_width() {
        for n in ["tiny", "small", "base", "large", "micro"] {
            let c = ModelConfig::preset(n).unwrap();
            assert_eq!(c.adapter_ffn, c.embed_dim / 4, "{n}");
        }
    }
}
