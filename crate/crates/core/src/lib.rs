//! Zero-shot style transfer with dual-path DDIM diffusion.
//!
//! A content image and a style image are both inverted to noise with the
//! same denoiser. While the content path is denoised, selected attention
//! blocks also attend to the style path's keys and values at the same step,
//! with the style logits scaled by `lambda`. The content latent's channel
//! means can additionally be pulled toward the style latent's before
//! denoising starts.
//!
//! The denoiser here is a small attention network trained on procedural
//! textures, which keeps every stage inspectable and testable on a laptop.

pub mod attention;
pub mod cli;
pub mod diffusion;
mod error;
pub mod image;
pub mod numerics;
pub mod pipeline;
pub mod sain;
pub mod toy;
pub mod video;

pub use error::{Error, Result};
