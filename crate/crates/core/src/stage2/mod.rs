//! Prompt-driven recoloring of an existing colorization.
//!
//! Building an edit session optimizes a text embedding `e_opt` so the frozen
//! denoiser reconstructs the input under it, then fine-tunes the denoiser
//! with `e_opt` held fixed. Edits interpolate between `e_opt` and the
//! embedding of a target prompt and sample; they never train.

pub mod prompt;
mod session;

use serde::{Deserialize, Serialize};

pub use prompt::{PromptOptions, PromptSet, Span};
pub use session::{append_provenance, read_manifest, EditOutput, EditSession, SessionManifest, SessionStatus, Variant, MANIFEST};

use crate::diffusion::{ldm_loss, ldm_loss_with_grad, DiffusionBackend, Latent, Wrt};
use crate::embedding::TextEmbedding;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub embed_steps: usize,
    pub embed_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub sample_steps: usize,
    /// Fraction of seeded noise mixed into the inverted start latent.
    pub renoise: f64,
    /// Seed of the stored reconstruction render.
    pub reconstruction_seed: u64,
    /// Seed for the training timestep and noise draws.
    pub seed: u64,
    pub guidance_scale: f64,
    pub grad_clip: Option<f64>,
    pub prompt: PromptOptions,
    pub adam: AdamConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            embed_steps: 500,
            embed_lr: 1e-3,
            finetune_steps: 1000,
            finetune_lr: 1e-6,
            sample_steps: 50,
            renoise: 0.1,
            reconstruction_seed: 0,
            seed: 0,
            guidance_scale: 1.0,
            grad_clip: None,
            prompt: PromptOptions::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl Stage2Config {
    /// Settings sized for the toy backend.
    pub fn toy() -> Self {
        Self {
            embed_steps: 200,
            finetune_steps: 300,
            finetune_lr: 3e-4,
            sample_steps: 20,
            grad_clip: Some(1.0),
            ..Self::default()
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.embed_lr > 0.0) || !(self.finetune_lr > 0.0) {
            return Err(Error::Config("stage2 learning rates must be positive".into()));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("stage2.sample_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.renoise) {
            return Err(Error::Config(format!("stage2.renoise must be in [0, 1], got {}", self.renoise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Embedding,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogEntry {
    pub phase: Phase,
    pub step: usize,
    pub t: usize,
    pub loss: f64,
}

/// `η·e_tgt + (1−η)·e_opt`.
pub fn interpolate(e_opt: &TextEmbedding, e_tgt: &TextEmbedding, eta: f64) -> Result<TextEmbedding> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::EtaOutOfRange(eta));
    }
    e_tgt.ensure_dim(e_opt.dim())?;
    let v = e_opt.as_slice().iter().zip(e_tgt.as_slice()).map(|(o, t)| eta * t + (1.0 - eta) * o).collect();
    TextEmbedding::new(v)
}

/// `count` evenly spaced weights over `[0.7, 0.975]`.
pub fn default_eta_grid(count: usize) -> Vec<f64> {
    const LO: f64 = 0.7;
    const HI: f64 = 0.975;
    match count {
        0 => Vec::new(),
        1 => vec![LO],
        n => (0..n).map(|i| LO + (HI - LO) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn check_finite(step: usize, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step, ldm: loss, cst: 0.0 });
    }
    Ok(())
}

/// Mean LDM loss of `backend` under `emb` over `probes` fixed `(t, ε)`
/// draws from `seed`.
pub fn probe_ldm<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z0: &Latent,
    emb: &TextEmbedding,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let timesteps = backend.schedule().timesteps();
    let mut total = 0.0;
    for _ in 0..probes {
        let t = rng.int(1, timesteps);
        let eps = Latent::gaussian(z0.shape(), &mut rng);
        total += ldm_loss(backend, z0, t, &eps, emb, backend.schedule())?;
    }
    Ok(total / probes.max(1) as f64)
}

/// Optimizes the embedding so the frozen denoiser reconstructs `z0`, starting
/// from `init`. Returns the embedding and the per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn optimize_embedding<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z0: &Latent,
    init: &TextEmbedding,
    steps: usize,
    lr: f64,
    seed: u64,
    adam: &AdamConfig,
    mut on_step: impl FnMut(&Stage2LogEntry),
) -> Result<(TextEmbedding, Vec<Stage2LogEntry>)> {
    init.ensure_dim(backend.info().embedding_dim)?;
    let mut emb = init.clone();
    let mut opt = adam.build(emb.dim(), lr);
    let mut rng = Rng::new(seed);
    let timesteps = backend.schedule().timesteps();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let t = rng.int(1, timesteps);
        let eps = Latent::gaussian(z0.shape(), &mut rng);
        let (loss, terms) = ldm_loss_with_grad(backend, z0, t, &eps, &emb, backend.schedule())?;
        let grads = backend.denoise_vjp(&terms.z_t, t, &emb, &terms.grad_eps_hat, Wrt::EMBEDDING)?;
        let grad = grads.embedding.ok_or_else(|| Error::Config("backend returned no embedding gradient".into()))?;
        check_finite(step, loss, &grad)?;
        opt.step(emb.as_mut_slice(), &grad);
        let entry = Stage2LogEntry { phase: Phase::Embedding, step, t, loss };
        on_step(&entry);
        log.push(entry);
    }
    Ok((emb, log))
}

/// Fine-tunes a copy of `backend`'s denoiser to reconstruct `z0` under the
/// fixed embedding `emb`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_for_reconstruction<B: DiffusionBackend + Clone>(
    backend: &B,
    z0: &Latent,
    emb: &TextEmbedding,
    steps: usize,
    lr: f64,
    seed: u64,
    adam: &AdamConfig,
    grad_clip: Option<f64>,
    mut on_step: impl FnMut(&Stage2LogEntry),
) -> Result<(B, Vec<Stage2LogEntry>)> {
    let mut tuned = backend.clone();
    let mut opt = adam.build(tuned.denoiser_params().len(), lr);
    let mut rng = Rng::new(seed);
    let timesteps = backend.schedule().timesteps();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let t = rng.int(1, timesteps);
        let eps = Latent::gaussian(z0.shape(), &mut rng);
        let (loss, terms) = ldm_loss_with_grad(&tuned, z0, t, &eps, emb, tuned.schedule())?;
        let grads = tuned.denoise_vjp(&terms.z_t, t, emb, &terms.grad_eps_hat, Wrt::PARAMS)?;
        let mut grad = grads.params.ok_or_else(|| Error::Config("backend returned no parameter gradient".into()))?;
        if let Some(max) = grad_clip {
            clip_grad_norm(&mut grad, max);
        }
        check_finite(step, loss, &grad)?;
        opt.step(tuned.denoiser_params_mut(), &grad);
        let entry = Stage2LogEntry { phase: Phase::Finetune, step, t, loss };
        on_step(&entry);
        log.push(entry);
    }
    if tuned.autoencoder_params() != backend.autoencoder_params() {
        return Err(Error::BackendFrozenViolation("autoencoder parameters changed during fine-tuning".into()));
    }
    Ok((tuned, log))
}
