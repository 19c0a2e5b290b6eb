//! Gaussian-window SSIM, following the common reference implementation:
//! separable Gaussian filter (σ = 1.5, truncated at 3.5σ) with mirror
//! padding, population variances, and the mean taken after cropping the
//! filter radius from every border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ColorImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

fn kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * plane[y * w + reflect(x as isize + j as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel planes.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, cfg: &SsimConfig) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if cfg.window == 0 || cfg.window % 2 == 0 {
        return Err(Error::Config(format!("SSIM window must be odd, got {}", cfg.window)));
    }
    if w.min(h) < cfg.window {
        return Err(Error::TooSmall { side: w.min(h), window: cfg.window });
    }
    let k = kernel(cfg.window, cfg.sigma);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let ux = filter(a, w, h, &k);
    let uy = filter(b, w, h, &k);
    let uxx = filter(&prod(a, a), w, h, &k);
    let uyy = filter(&prod(b, b), w, h, &k);
    let uxy = filter(&prod(a, b), w, h, &k);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let pad = (cfg.window - 1) / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in pad..h - pad {
        for x in pad..w - pad {
            let i = y * w + x;
            let (mx, my) = (ux[i], uy[i]);
            let vx = uxx[i] - mx * mx;
            let vy = uyy[i] - my * my;
            let cxy = uxy[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Channel-averaged SSIM with the standard constants.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with(a: &ColorImage, b: &ColorImage, cfg: &SsimConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::SizeMismatch { a: a.dims(), b: b.dims() });
    }
    let (w, h) = a.dims();
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_plane(a.plane(c), b.plane(c), w, h, cfg)?;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn constant_images_closed_form() {
        let (a, b) = (0.4, 0.5);
        let x = ColorImage::filled(16, 16, [a; 3]).unwrap();
        let y = ColorImage::filled(16, 16, [b; 3]).unwrap();
        let c1 = 0.01f64.powi(2);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-12);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_small() {
        let x = ColorImage::filled(10, 16, [0.5; 3]).unwrap();
        assert!(matches!(ssim(&x, &x), Err(Error::TooSmall { side: 10, window: 11 })));
    }
}
