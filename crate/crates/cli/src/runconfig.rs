//! Line-based `key = value` run configuration with `#` comments.

use std::path::PathBuf;

use vit_adapter_core::config::{AttentionKind, InteractionMode, ModelConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value:?}")]
    Value { key: String, value: String },
    #[error(transparent)]
    Model(#[from] vit_adapter_core::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

pub fn parse_mode(s: &str) -> Option<InteractionMode> {
    match s {
        "attention" => Some(InteractionMode::Attention),
        "add" => Some(InteractionMode::Add),
        "none" => Some(InteractionMode::None),
        _ => None,
    }
}

pub fn parse_attention(s: &str) -> Option<AttentionKind> {
    match s {
        "deformable" => Some(AttentionKind::Deformable),
        "global" => Some(AttentionKind::Global),
        _ => None,
    }
}

pub fn mode_name(m: InteractionMode) -> &'static str {
    match m {
        InteractionMode::Attention => "attention",
        InteractionMode::Add => "add",
        InteractionMode::None => "none",
    }
}

pub fn attention_name(a: AttentionKind) -> &'static str {
    match a {
        AttentionKind::Deformable => "deformable",
        AttentionKind::Global => "global",
    }
}

/// Everything a run needs. Unset overrides keep the preset's value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Unset means the command's default: f32, or f64 for gradient checks.
    pub precision: Option<Precision>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub mode: Option<InteractionMode>,
    pub attention: Option<AttentionKind>,
    pub interactions: Option<usize>,
    pub window_size: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "micro".into(),
            seed: 0,
            precision: None,
            input: None,
            output: None,
            mode: None,
            attention: None,
            interactions: None,
            window_size: None,
        }
    }
}

impl RunConfig {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::Value {
            key: key.into(),
            value: value.into(),
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "preset" => self.preset = value.into(),
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "precision" => self.precision = Some(Precision::parse(value).ok_or_else(bad)?),
            "input" => self.input = Some(value.into()),
            "output" => self.output = Some(value.into()),
            "mode" => self.mode = Some(parse_mode(value).ok_or_else(bad)?),
            "attention" => self.attention = Some(parse_attention(value).ok_or_else(bad)?),
            "interactions" => self.interactions = Some(num(value)?),
            "window_size" => self.window_size = Some(num(value)?),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "empty key or value".into(),
                });
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// The preset with every override applied, validated.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut m = ModelConfig::preset(&self.preset)?;
        if let Some(v) = self.mode {
            m.mode = v;
        }
        if let Some(v) = self.attention {
            m.attention = v;
        }
        if let Some(v) = self.interactions {
            m.interactions = v;
        }
        if let Some(v) = self.window_size {
            m.window_size = v;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn precision(&self) -> Precision {
        self.precision.unwrap_or_default()
    }

    /// Renders the run settings in the file format, so `parse` reads them back.
    pub fn to_text(&self) -> String {
        let mut s = format!("preset = {}\nseed = {}\n", self.preset, self.seed);
        if let Some(p) = self.precision {
            s += if p == Precision::F64 {
                "precision = f64\n"
            } else {
                "precision = f32\n"
            };
        }
        if let Some(p) = &self.input {
            s += &format!("input = {}\n", p.display());
        }
        if let Some(p) = &self.output {
            s += &format!("output = {}\n", p.display());
        }
        if let Some(m) = self.mode {
            s += &format!("mode = {}\n", mode_name(m));
        }
        if let Some(a) = self.attention {
            s += &format!("attention = {}\n", attention_name(a));
        }
        if let Some(n) = self.interactions {
            s += &format!("interactions = {n}\n");
        }
        if let Some(w) = self.window_size {
            s += &format!("window_size = {w}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_whitespace() {
        let c =
            RunConfig::parse("# run\n preset = tiny  # inline\n\nseed=7\nmode = add\n").unwrap();
        assert_eq!(c.preset, "tiny");
        assert_eq!(c.seed, 7);
        assert_eq!(c.mode, Some(InteractionMode::Add));
    }

    #[test]
    fn errors_name_the_line_or_key() {
        assert!(matches!(
            RunConfig::parse("seed 3"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("colour = red"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("precision = f16"),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn overrides_are_validated() {
        let c = RunConfig::parse("interactions = 3").unwrap();
        assert!(c.model_config().is_err());
        let c = RunConfig::parse("interactions = 2\nattention = global").unwrap();
        let m = c.model_config().unwrap();
        assert_eq!((m.interactions, m.attention), (2, AttentionKind::Global));
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::parse(
            "preset = small\nseed = 3\nprecision = f64\nwindow_size = 7\nmode = none",
        )
        .unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
