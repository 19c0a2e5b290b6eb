//! Latent diffusion machinery: schedules, forward noising, the denoising
//! loss, deterministic DDIM inversion and sampling, and the backend contract.

mod checkpoint;
mod ddim;
mod schedule;
pub mod toy;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    restore_backend, snapshot_backend, Checkpoint, CheckpointFile, CheckpointHeader, TensorEntry, FORMAT_VERSION,
};
pub use ddim::{ddim_invert, ddim_invert_step, ddim_sample, ddim_step, GuidedDenoiser};
pub use schedule::{ddim_timesteps, make_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind};

use crate::embedding::TextEmbedding;
use crate::error::{Error, Result};
use crate::image::ColorImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A point in the backend's latent space, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: LatentShape,
    data: Vec<f64>,
}

impl Latent {
    pub fn new(shape: LatentShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("latent contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    /// No finiteness check: denoiser outputs go through here so that a
    /// diverged model surfaces as a non-finite loss in the training loop.
    pub(crate) fn unchecked(shape: LatentShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn gaussian(shape: LatentShape, rng: &mut crate::rng::Rng) -> Self {
        Self { shape, data: rng.normal_vec(shape.len()) }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn ensure_shape(&self, shape: LatentShape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, self.shape));
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        other.ensure_shape(self.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Latent { shape: self.shape, data })
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Anything that predicts the noise in `z_t`.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, z_t: &Latent, t: usize, emb: &TextEmbedding) -> Result<Latent>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, z_t: &Latent, t: usize, emb: &TextEmbedding) -> Result<Latent> {
        (**self).denoise(z_t, t, emb)
    }
}

/// Static facts a backend declares about itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub image_width: usize,
    pub image_height: usize,
    pub latent_shape: LatentShape,
    pub embedding_dim: usize,
    /// Minimum PSNR (dB) of `decode(encode(x))` on in-distribution images.
    pub reconstruction_floor_db: f64,
    /// Max-abs latent error bound for a DDIM invert→sample round trip.
    pub inversion_tolerance: f64,
}

/// Which inputs of the denoiser a backward pass should differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Wrt {
    pub params: bool,
    pub embedding: bool,
}

impl Wrt {
    pub const PARAMS: Wrt = Wrt { params: true, embedding: false };
    pub const EMBEDDING: Wrt = Wrt { params: false, embedding: true };
}

#[derive(Debug, Clone, Default)]
pub struct DenoiseGrads {
    pub params: Option<Vec<f64>>,
    pub embedding: Option<Vec<f64>>,
}

/// The encoder `E`, decoder `D` and denoiser `ε_θ` of a latent diffusion model.
///
/// Training code only ever touches the denoiser's parameters; the autoencoder
/// is exposed read-only through [`DiffusionBackend::autoencoder_params`] so
/// callers can assert it stays frozen. Every backward pass increments
/// [`DiffusionBackend::gradient_evaluations`].
pub trait DiffusionBackend: Denoiser {
    fn info(&self) -> BackendInfo;
    fn schedule(&self) -> &NoiseSchedule;

    fn encode(&self, img: &ColorImage) -> Result<Latent>;
    fn decode(&self, z: &Latent) -> Result<ColorImage>;

    /// Pullback of [`decode`](Self::decode): given `∂L/∂image` (planar RGB),
    /// returns `∂L/∂z`.
    fn decode_vjp(&self, z: &Latent, grad_image: &[f64]) -> Result<Latent>;

    /// Pullback of the denoiser output through the requested inputs.
    fn denoise_vjp(&self, z_t: &Latent, t: usize, emb: &TextEmbedding, grad_out: &Latent, wrt: Wrt) -> Result<DenoiseGrads>;

    fn denoiser_params(&self) -> &[f64];
    fn denoiser_params_mut(&mut self) -> &mut [f64];
    fn autoencoder_params(&self) -> &[f64];

    fn gradient_evaluations(&self) -> u64;
}

/// Closed-form forward noising `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε`.
pub fn add_noise(z0: &Latent, eps: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// `ẑ₀ = (z_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(z_t: &Latent, eps_hat: &Latent, alpha_bar: f64) -> Result<Latent> {
    let s = alpha_bar.sqrt();
    z_t.axpby(1.0 / s, eps_hat, -(1.0 - alpha_bar).sqrt() / s)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

/// `‖ε − ε_θ(z_t, t, emb)‖²` averaged over latent elements, where `z_t` is
/// `z0` noised to `t` with `eps`.
pub fn ldm_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    z0: &Latent,
    t: usize,
    eps: &Latent,
    emb: &TextEmbedding,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(ldm_loss_with_grad(denoiser, z0, t, eps, emb, schedule)?.0)
}

/// [`ldm_loss`] plus `z_t`, the prediction `ε̂` and `∂L/∂ε̂`.
pub fn ldm_loss_with_grad<D: Denoiser + ?Sized>(
    denoiser: &D,
    z0: &Latent,
    t: usize,
    eps: &Latent,
    emb: &TextEmbedding,
    schedule: &NoiseSchedule,
) -> Result<(f64, LdmTerms)> {
    eps.ensure_shape(z0.shape())?;
    let z_t = add_noise(z0, eps, t, schedule)?;
    let eps_hat = denoiser.denoise(&z_t, t, emb)?;
    eps_hat.ensure_shape(z0.shape())?;
    let (loss, grad) = mse_with_grad(eps_hat.data(), eps.data());
    let grad_eps_hat = Latent { shape: z0.shape(), data: grad };
    Ok((loss, LdmTerms { z_t, eps_hat, grad_eps_hat }))
}

#[derive(Debug, Clone)]
pub struct LdmTerms {
    pub z_t: Latent,
    pub eps_hat: Latent,
    pub grad_eps_hat: Latent,
}
