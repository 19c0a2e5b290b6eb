//! Text-guided image colorization with latent diffusion.
//!
//! The pipeline has two stages. [`stage1`] fine-tunes a diffusion denoiser on
//! a single grayscale image under a contrastive text loss that pulls the
//! decoded estimate toward the context prompt and away from "anti-color"
//! prompts, then samples a primary colorization. [`stage2`] reconstructs that
//! colorization through an optimized text embedding and a fine-tuned
//! denoiser, after which colors are edited by interpolating between the
//! optimized embedding and the embedding of a color-annotated prompt.
//! [`align`] transplants the generated colors onto the exact luminance of the
//! input, and [`metrics`] scores results.
//!
//! Everything runs against the [`diffusion::DiffusionBackend`] and
//! [`guidance::GuidanceBackend`] contracts. The crate ships deterministic toy
//! implementations of both ([`diffusion::toy`], [`guidance::ToyGuidance`])
//! small enough to train on one CPU core.

pub mod align;
pub mod color;
pub mod config;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod synthetic;

pub use config::PipelineConfig;
pub use embedding::TextEmbedding;
pub use error::{Error, Result};
pub use image::{replicate_gray, rgb_to_gray, ColorImage, GrayImage, Luma};
pub use rng::Rng;
