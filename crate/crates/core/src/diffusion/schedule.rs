use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Parameters from which a [`NoiseSchedule`] is rebuilt, e.g. when a
/// checkpoint is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Variance schedule over timesteps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t` in `1..=T`; `t = 0` is the clean signal (`ᾱ_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidTimestep { t, max: self.timesteps() });
        }
        Ok(())
    }
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if timesteps < 10 {
        return Err(Error::InvalidSchedule(format!("T = {timesteps} < 10")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            const S: f64 = 0.008;
            let f = |t: f64| ((t / timesteps as f64 + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=timesteps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_start, 0.999))
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }

    if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
        return Err(Error::InvalidSchedule("beta outside (0, 1)".into()));
    }
    if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidSchedule("alpha_bar is not strictly decreasing".into()));
    }
    if alpha_bars[0] <= 0.9 {
        return Err(Error::InvalidSchedule(format!("alpha_bar_1 = {} <= 0.9", alpha_bars[0])));
    }
    let last = alpha_bars[timesteps - 1];
    if last >= 0.05 {
        return Err(Error::InvalidSchedule(format!("alpha_bar_T = {last} >= 0.05")));
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig { timesteps, beta_start, beta_end, kind },
        betas,
        alphas,
        alpha_bars,
    })
}

/// `steps` timesteps spaced evenly over `1..=T`, ascending, always ending at `T`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps <= total, "need 1 <= steps <= T");
    if steps == 1 {
        return vec![total];
    }
    (0..steps)
        .map(|i| 1 + ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect()
}
