//! Parameter storage, initialization and the basic layers shared by every
//! part of the model.

mod layers;
mod params;

pub use layers::{Conv2d, ConvTranspose2d, GroupNorm, LayerNorm, Linear};
pub use params::{component_rng, Ctx, Init, Param, ParamId, ParamStore};
