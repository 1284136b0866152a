#![cfg_attr(not(feature = "std"), no_std)]
#![doc = "Numerical core of the ViT-Adapter: dense tensors with reverse-mode\ndifferentiation, the plain ViT backbone, the spatial prior module,\ndeformable cross-attention, the injector/extractor interaction loop,\nfrequency analysis and a synthetic dense-prediction task."]

extern crate alloc;
#[cfg(all(test, not(feature = "std")))]
extern crate std;

pub mod analysis;
mod error;
pub mod ops;
mod real;
mod tape;
mod tensor;

pub mod attention;
pub mod backbone;
pub mod config;
pub mod deform;
pub mod gradcheck;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod spm;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tape::{GradSink, Gradients, Tape};
pub use tensor::{GradId, Tensor};
