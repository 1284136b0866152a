//! Command-line front end of the ViT-Adapter core: the `VADW` weights
//! format, PPM/PGM image IO, run configuration files and a background
//! batch prefetcher.

pub mod cli;
pub mod image;
pub mod prefetch;
pub mod runconfig;
pub mod weights;
