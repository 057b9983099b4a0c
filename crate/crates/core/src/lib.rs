//! Desk-scale joint appearance + geometry scene generation.
//!
//! The crate trains every learned component from scratch on a procedural
//! multi-view world: an RGB spatiotemporal autoencoder, a frozen multi-view
//! reconstruction surrogate, an adapter that recasts the surrogate's tokens
//! as diffusion-ready geometry latents aligned with the RGB latent
//! distribution, and a flow-matching transformer that generates both latent
//! halves jointly. Decoding yields frames, depths, cameras, and a merged
//! point cloud; the evaluation harness scores appearance (PSNR/SSIM),
//! geometry (accuracy/completeness/Chamfer) and poses (AUC@30).

pub mod error;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
