//! Colorization with a generative color prior.
//!
//! The denoiser is fine-tuned on a single grayscale image under
//! `L_LDM + λ·L_CST`. The contrastive term needs an image, and sampling a
//! full trajectory per training step is out of reach, so each step decodes
//! the one-step estimate `ẑ₀ = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t` and scores that.
//! After training the gray latent is DDIM-inverted with the original weights
//! and sampled back with the fine-tuned ones.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    add_noise, ddim_invert, ddim_sample, ldm_loss_with_grad, predict_x0, DiffusionBackend, GuidedDenoiser, Latent, Wrt,
};
use crate::embedding::TextEmbedding;
use crate::error::{Error, Result};
use crate::guidance::{combined_loss, contrastive_loss_with_grad, GuidanceBackend, LogitMode, NegativePromptSet};
use crate::image::{ColorImage, GrayImage};
use crate::nn::{clip_grad_norm, AdamConfig};
use crate::rng::Rng;

/// How the grayscale latent is taken to the terminal noise level before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// Deterministic DDIM inversion with the pre-fine-tune weights.
    #[default]
    Invert,
    /// Closed-form noising to `T` with seeded Gaussian noise.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub sample_steps: usize,
    pub seed: u64,
    pub logit_mode: LogitMode,
    /// Global L2 clip applied to the denoiser gradient each step.
    pub grad_clip: Option<f64>,
    pub guidance_scale: f64,
    pub forward: ForwardMode,
    pub adam: AdamConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 2e-6,
            lambda: 0.5,
            sample_steps: 50,
            seed: 0,
            logit_mode: LogitMode::Dot,
            grad_clip: Some(1.0),
            guidance_scale: 1.0,
            forward: ForwardMode::Invert,
            adam: AdamConfig::default(),
        }
    }
}

impl Stage1Config {
    /// Settings sized for the toy backend: its denoiser is tiny and needs a
    /// far larger step size than a Stable-Diffusion U-Net.
    pub fn toy() -> Self {
        Self { steps: 300, lr: 1e-3, sample_steps: 20, ..Self::default() }
    }

    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("stage1.steps must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("stage1.lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("stage1.lambda must be non-negative, got {}", self.lambda)));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("stage1.sample_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub t: usize,
    pub ldm: f64,
    pub cst: f64,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Output<B> {
    /// Raw sample at the gray input's resolution, before alignment.
    pub primary: ColorImage,
    pub backend: B,
    pub log: Vec<TrainLogEntry>,
}

/// Everything one optimization step needs that stays fixed across steps.
struct Objective<'a, G: ?Sized> {
    guidance: &'a G,
    z0: Latent,
    positive: TextEmbedding,
    negatives: Vec<TextEmbedding>,
    lambda: f64,
    mode: LogitMode,
}

impl<G: GuidanceBackend + ?Sized> Objective<'_, G> {
    /// Losses at `(t, eps)` and, if `want_grad`, `∂combined/∂ε̂` pulled back
    /// to the denoiser parameters.
    fn eval<B: DiffusionBackend + ?Sized>(
        &self,
        backend: &B,
        t: usize,
        eps: &Latent,
        want_grad: bool,
    ) -> Result<(TrainLogEntry, Option<Vec<f64>>)> {
        let schedule = backend.schedule();
        let (ldm, terms) = ldm_loss_with_grad(backend, &self.z0, t, eps, &self.positive, schedule)?;
        if !ldm.is_finite() {
            // decoding a non-finite x̂₀ would fail with a less useful error
            return Err(Error::NonFiniteLoss { step: 0, ldm, cst: f64::NAN });
        }
        let ab = schedule.alpha_bar(t);
        let x0 = predict_x0(&terms.z_t, &terms.eps_hat, ab)?;
        let img = backend.decode(&x0)?;
        let e = self.guidance.encode_image(&img)?;
        let negs: Vec<&[f64]> = self.negatives.iter().map(TextEmbedding::as_slice).collect();
        let (cst, grad_e) = contrastive_loss_with_grad(e.as_slice(), self.positive.as_slice(), &negs, self.mode)?;
        let entry = TrainLogEntry { step: 0, t, ldm, cst, combined: combined_loss(ldm, cst, self.lambda) };
        if !want_grad {
            return Ok((entry, None));
        }
        let mut grad_eps = terms.grad_eps_hat;
        if self.lambda != 0.0 {
            let grad_img = self.guidance.encode_image_vjp(&img, &grad_e)?;
            let grad_x0 = backend.decode_vjp(&x0, &grad_img)?;
            // ∂ẑ₀/∂ε̂ = −√(1−ᾱ)/√ᾱ
            let k = -self.lambda * ((1.0 - ab) / ab).sqrt();
            grad_eps = grad_eps.axpby(1.0, &grad_x0, k)?;
        }
        let grads = backend.denoise_vjp(&terms.z_t, t, &self.positive, &grad_eps, Wrt::PARAMS)?;
        Ok((entry, grads.params))
    }
}

fn check_embedding_dims<B: DiffusionBackend + ?Sized, G: GuidanceBackend + ?Sized>(backend: &B, guidance: &G) -> Result<()> {
    let (d, g) = (backend.info().embedding_dim, guidance.embedding_dim());
    if d != g {
        return Err(Error::DimensionMismatch { expected: d, actual: g });
    }
    Ok(())
}

/// Encodes a gray image (replicated to RGB, resized to the backend's input
/// size).
pub fn encode_gray<B: DiffusionBackend + ?Sized>(backend: &B, gray: &GrayImage) -> Result<Latent> {
    let info = backend.info();
    let rgb = gray.to_color().resized(info.image_width, info.image_height)?;
    backend.encode(&rgb)
}

/// Decodes and resizes back to `width × height`.
pub fn decode_to<B: DiffusionBackend + ?Sized>(backend: &B, z: &Latent, width: usize, height: usize) -> Result<ColorImage> {
    backend.decode(z)?.resized(width, height)
}

/// Samples from the gray latent: takes it to `T` (with `reference` weights when
/// inverting), then runs DDIM with `tuned` under `emb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_from_gray<B: DiffusionBackend + ?Sized, R: DiffusionBackend + ?Sized>(
    tuned: &B,
    reference: &R,
    z_gray: &Latent,
    emb: &TextEmbedding,
    unconditional: &TextEmbedding,
    steps: usize,
    guidance_scale: f64,
    forward: ForwardMode,
    seed: u64,
) -> Result<Latent> {
    let schedule = tuned.schedule();
    let z_t = match forward {
        ForwardMode::Invert => ddim_invert(reference, z_gray, emb, steps, schedule)?,
        ForwardMode::Noise => {
            let eps = Latent::gaussian(z_gray.shape(), &mut Rng::new(seed));
            add_noise(z_gray, &eps, schedule.timesteps(), schedule)?
        }
    };
    let guided = GuidedDenoiser { inner: tuned, unconditional, scale: guidance_scale };
    ddim_sample(&guided, &z_t, emb, steps, schedule, 0.0)
}

/// Fine-tunes a copy of `backend` on `gray` under the combined loss and
/// samples the primary colorization.
///
/// `on_step` sees every log entry as it is produced.
pub fn colorize_stage1<B, G>(
    gray: &GrayImage,
    context: &str,
    negatives: &mut NegativePromptSet,
    cfg: &Stage1Config,
    backend: &B,
    guidance: &G,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<Stage1Output<B>>
where
    B: DiffusionBackend + Clone,
    G: GuidanceBackend + ?Sized,
{
    cfg.validate()?;
    if context.trim().is_empty() {
        return Err(Error::Config("context prompt is empty".into()));
    }
    check_embedding_dims(backend, guidance)?;

    let objective = Objective {
        guidance,
        z0: encode_gray(backend, gray)?,
        positive: guidance.encode_text(context),
        negatives: negatives.embeddings(guidance).to_vec(),
        lambda: cfg.lambda,
        mode: cfg.logit_mode,
    };

    let mut tuned = backend.clone();
    let mut adam = cfg.adam.build(tuned.denoiser_params().len(), cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let shape = objective.z0.shape();
    let timesteps = backend.schedule().timesteps();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t = rng.int(1, timesteps);
        let eps = Latent::gaussian(shape, &mut rng);
        let (mut entry, grad) = objective.eval(&tuned, t, &eps, true).map_err(|e| match e {
            Error::NonFiniteLoss { ldm, cst, .. } => Error::NonFiniteLoss { step, ldm, cst },
            e => e,
        })?;
        entry.step = step;
        if !entry.combined.is_finite() {
            return Err(Error::NonFiniteLoss { step, ldm: entry.ldm, cst: entry.cst });
        }
        let mut grad = grad.expect("gradient requested");
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grad, max);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, ldm: entry.ldm, cst: entry.cst });
        }
        adam.step(tuned.denoiser_params_mut(), &grad);
        on_step(&entry);
        log.push(entry);
    }

    if tuned.autoencoder_params() != backend.autoencoder_params() {
        return Err(Error::BackendFrozenViolation("autoencoder parameters changed during stage 1".into()));
    }

    let uncond = guidance.encode_text("");
    let z = sample_from_gray(
        &tuned,
        backend,
        &objective.z0,
        &objective.positive,
        &uncond,
        cfg.sample_steps,
        cfg.guidance_scale,
        cfg.forward,
        cfg.seed,
    )?;
    let primary = decode_to(&tuned, &z, gray.width(), gray.height())?;
    Ok(Stage1Output { primary, backend: tuned, log })
}

/// Mean contrastive term of `backend` over fixed `(t, ε)` probes drawn from
/// `seed`; used to compare guided and unguided runs.
#[allow(clippy::too_many_arguments)]
pub fn probe_contrastive<B, G>(
    backend: &B,
    guidance: &G,
    gray: &GrayImage,
    context: &str,
    negatives: &mut NegativePromptSet,
    mode: LogitMode,
    probes: usize,
    seed: u64,
) -> Result<f64>
where
    B: DiffusionBackend + ?Sized,
    G: GuidanceBackend + ?Sized,
{
    check_embedding_dims(backend, guidance)?;
    let objective = Objective {
        guidance,
        z0: encode_gray(backend, gray)?,
        positive: guidance.encode_text(context),
        negatives: negatives.embeddings(guidance).to_vec(),
        lambda: 0.0,
        mode,
    };
    let mut rng = Rng::new(seed);
    let timesteps = backend.schedule().timesteps();
    let mut total = 0.0;
    for _ in 0..probes {
        let t = rng.int(1, timesteps);
        let eps = Latent::gaussian(objective.z0.shape(), &mut rng);
        total += objective.eval(backend, t, &eps, false)?.0.cst;
    }
    Ok(total / probes.max(1) as f64)
}

/// Losses at a single `(t, ε)` draw and the gradient of the combined loss
/// with respect to the denoiser parameters, exactly as one training step
/// computes them (before clipping).
#[allow(clippy::too_many_arguments)]
pub fn combined_objective<B, G>(
    backend: &B,
    guidance: &G,
    gray: &GrayImage,
    context: &str,
    negatives: &mut NegativePromptSet,
    lambda: f64,
    mode: LogitMode,
    t: usize,
    eps: &Latent,
) -> Result<(TrainLogEntry, Vec<f64>)>
where
    B: DiffusionBackend + ?Sized,
    G: GuidanceBackend + ?Sized,
{
    check_embedding_dims(backend, guidance)?;
    let objective = Objective {
        guidance,
        z0: encode_gray(backend, gray)?,
        positive: guidance.encode_text(context),
        negatives: negatives.embeddings(guidance).to_vec(),
        lambda,
        mode,
    };
    let (entry, grad) = objective.eval(backend, t, eps, true)?;
    Ok((entry, grad.expect("gradient requested")))
}

/// Trailing moving average of the combined loss over `window` entries.
pub fn moving_average(log: &[TrainLogEntry], window: usize) -> Vec<f64> {
    if window == 0 || log.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(log.len() - window + 1);
    let mut sum: f64 = log[..window].iter().map(|e| e.combined).sum();
    out.push(sum / window as f64);
    for i in window..log.len() {
        sum += log[i].combined - log[i - window].combined;
        out.push(sum / window as f64);
    }
    out
}
