use super::{ddim_timesteps, Denoiser, Latent, NoiseSchedule};
use crate::embedding::TextEmbedding;
use crate::error::{Error, Result};

/// Deterministic DDIM update moving `z` from noise level `ab_from` to
/// `ab_to` along the predicted noise direction.
pub fn ddim_step(z: &Latent, eps_hat: &Latent, ab_from: f64, ab_to: f64) -> Result<Latent> {
    // z' = √ab_to · ẑ₀ + √(1−ab_to) · ε̂,  ẑ₀ = (z − √(1−ab_from) ε̂) / √ab_from
    let r = (ab_to / ab_from).sqrt();
    let c = (1.0 - ab_to).sqrt() - r * (1.0 - ab_from).sqrt();
    z.axpby(r, eps_hat, c)
}

/// Same update as [`ddim_step`], named for the inversion direction.
pub fn ddim_invert_step(z: &Latent, eps_hat: &Latent, ab_from: f64, ab_to: f64) -> Result<Latent> {
    ddim_step(z, eps_hat, ab_from, ab_to)
}

fn check_steps(steps: usize, schedule: &NoiseSchedule) -> Result<()> {
    if steps == 0 || steps > schedule.timesteps() {
        return Err(Error::Config(format!("DDIM steps must be in 1..={}, got {steps}", schedule.timesteps())));
    }
    Ok(())
}

/// Maps a clean latent to the terminal latent of the deterministic DDIM
/// trajectory over an evenly spaced grid of `steps` timesteps.
///
/// Each step evaluates the denoiser at the current latent and the *next*
/// timestep, so that [`ddim_sample`] over the same grid retraces it.
pub fn ddim_invert<D: Denoiser + ?Sized>(
    denoiser: &D,
    z0: &Latent,
    emb: &TextEmbedding,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    check_steps(steps, schedule)?;
    let grid = ddim_timesteps(schedule.timesteps(), steps);
    let mut z = z0.clone();
    let mut ab_prev = 1.0;
    for &t in &grid {
        let eps = denoiser.denoise(&z, t, emb)?;
        let ab = schedule.alpha_bar(t);
        z = ddim_invert_step(&z, &eps, ab_prev, ab)?;
        ab_prev = ab;
    }
    Ok(z)
}

/// Deterministic DDIM sampling (`eta = 0`) from `z_T` down to a clean latent.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    z_t: &Latent,
    emb: &TextEmbedding,
    steps: usize,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Result<Latent> {
    if eta != 0.0 {
        return Err(Error::Config(format!("only deterministic DDIM (eta = 0) is supported, got {eta}")));
    }
    check_steps(steps, schedule)?;
    let grid = ddim_timesteps(schedule.timesteps(), steps);
    let mut z = z_t.clone();
    for i in (0..grid.len()).rev() {
        let t = grid[i];
        let ab_to = if i == 0 { 1.0 } else { schedule.alpha_bar(grid[i - 1]) };
        let eps = denoiser.denoise(&z, t, emb)?;
        z = ddim_step(&z, &eps, schedule.alpha_bar(t), ab_to)?;
    }
    Ok(z)
}

/// Classifier-free guidance: `ε̂ = ε_u + s·(ε_c − ε_u)`. A scale of 1 passes
/// the conditional prediction through untouched.
pub struct GuidedDenoiser<'a, D: ?Sized> {
    pub inner: &'a D,
    pub unconditional: &'a TextEmbedding,
    pub scale: f64,
}

impl<D: Denoiser + ?Sized> Denoiser for GuidedDenoiser<'_, D> {
    fn denoise(&self, z_t: &Latent, t: usize, emb: &TextEmbedding) -> Result<Latent> {
        let cond = self.inner.denoise(z_t, t, emb)?;
        if self.scale == 1.0 {
            return Ok(cond);
        }
        let uncond = self.inner.denoise(z_t, t, self.unconditional)?;
        uncond.axpby(1.0 - self.scale, &cond, self.scale)
    }
}
