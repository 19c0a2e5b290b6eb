//! Spatial alignment: keep a colorization's chroma, restore the input's
//! exact structure.
//!
//! [`align_chroma`] works per pixel in L*a*b*. It keeps the colorized hue,
//! solves for the lightness whose luma equals the input gray value, and
//! shrinks chroma only as far as needed to stay inside the sRGB gamut. The
//! result projects back onto the input gray exactly (up to bisection
//! tolerance), and re-aligning an aligned image is a no-op.
//!
//! [`align_correspondence`] first warps the colorization along a dense
//! patch-match field so chroma lands on the matching structure, then calls
//! [`align_chroma`].

mod patchmatch;

use serde::{Deserialize, Serialize};

pub use patchmatch::{correspondence, warp, Field, PatchMatchConfig};

use crate::color::{lab_to_srgb_unclamped, neutral_lightness, srgb_to_lab, LabImage};
use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage, Luma};

const L_ITERS: usize = 56;
const S_ITERS: usize = 36;
const GAMUT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMethod {
    #[default]
    Chroma,
    Correspondence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub method: AlignMethod,
    pub luma: Luma,
    pub patchmatch: PatchMatchConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { method: AlignMethod::Chroma, luma: Luma::Rec601, patchmatch: PatchMatchConfig::default() }
    }
}

/// Runs the configured alignment.
pub fn align(gray: &GrayImage, colorized: &ColorImage, cfg: &AlignConfig) -> Result<ColorImage> {
    match cfg.method {
        AlignMethod::Chroma => align_chroma_with(gray, colorized, cfg.luma),
        AlignMethod::Correspondence => align_correspondence_with(gray, colorized, &cfg.patchmatch, cfg.luma),
    }
}

fn check_sizes(gray: &GrayImage, colorized: &ColorImage) -> Result<()> {
    if gray.dims() != colorized.dims() {
        return Err(Error::SizeMismatch { a: gray.dims(), b: colorized.dims() });
    }
    Ok(())
}

/// The literal transplant: the input gray mapped to neutral L*, with the
/// colorization's a* and b*. [`align_chroma`] refines this per pixel.
pub fn transplant_lab(gray: &GrayImage, colorized: &ColorImage) -> Result<LabImage> {
    check_sizes(gray, colorized)?;
    let (w, h) = gray.dims();
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let [_, a, b] = srgb_to_lab(colorized.get(x, y));
            data[i] = neutral_lightness(gray.get(x, y));
            data[n + i] = a;
            data[2 * n + i] = b;
        }
    }
    Ok(LabImage { width: w, height: h, data })
}

fn luma_unclamped(luma: Luma, rgb: [f64; 3]) -> f64 {
    let [wr, _, wb] = luma.weights();
    rgb[1] + wr * (rgb[0] - rgb[1]) + wb * (rgb[2] - rgb[1])
}

fn in_gamut(rgb: [f64; 3]) -> bool {
    rgb.iter().all(|v| (-GAMUT_EPS..=1.0 + GAMUT_EPS).contains(v))
}

/// Lightness whose color `(L, a, b)` has luma `g`, if one exists in `[0, 100]`.
fn solve_lightness(g: f64, a: f64, b: f64, luma: Luma) -> Option<[f64; 3]> {
    let f = |l: f64| luma_unclamped(luma, lab_to_srgb_unclamped([l, a, b])) - g;
    let (mut lo, mut hi) = (0.0, 100.0);
    let (flo, fhi) = (f(lo), f(hi));
    if flo > 0.0 || fhi < 0.0 {
        return None;
    }
    for _ in 0..L_ITERS {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rgb = lab_to_srgb_unclamped([0.5 * (lo + hi), a, b]);
    in_gamut(rgb).then_some(rgb)
}

/// Color with luma exactly `g` (to bisection tolerance) and the hue of `(a, b)`,
/// keeping as much of its chroma as the gamut allows.
pub fn align_pixel(g: f64, a: f64, b: f64, luma: Luma) -> [f64; 3] {
    let neutral = [g; 3];
    if g <= 0.0 || g >= 1.0 || (a == 0.0 && b == 0.0) {
        return neutral;
    }
    if let Some(rgb) = solve_lightness(g, a, b, luma) {
        return rgb.map(|v| v.clamp(0.0, 1.0));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = neutral;
    for _ in 0..S_ITERS {
        let s = 0.5 * (lo + hi);
        match solve_lightness(g, s * a, s * b, luma) {
            Some(rgb) => {
                best = rgb;
                lo = s;
            }
            None => hi = s,
        }
    }
    best.map(|v| v.clamp(0.0, 1.0))
}

/// Chroma transplant with Rec.601 luma.
pub fn align_chroma(gray: &GrayImage, colorized: &ColorImage) -> Result<ColorImage> {
    align_chroma_with(gray, colorized, Luma::Rec601)
}

pub fn align_chroma_with(gray: &GrayImage, colorized: &ColorImage, luma: Luma) -> Result<ColorImage> {
    check_sizes(gray, colorized)?;
    let (w, h) = gray.dims();
    ColorImage::from_fn(w, h, |x, y| {
        let [_, a, b] = srgb_to_lab(colorized.get(x, y));
        align_pixel(gray.get(x, y), a, b, luma)
    })
}

/// Patch-match warp of the colorization onto the gray structure, then
/// [`align_chroma`].
pub fn align_correspondence(gray: &GrayImage, colorized: &ColorImage, cfg: &PatchMatchConfig) -> Result<ColorImage> {
    align_correspondence_with(gray, colorized, cfg, Luma::Rec601)
}

pub fn align_correspondence_with(
    gray: &GrayImage,
    colorized: &ColorImage,
    cfg: &PatchMatchConfig,
    luma: Luma,
) -> Result<ColorImage> {
    check_sizes(gray, colorized)?;
    let field = correspondence(gray, &colorized.to_gray(luma), cfg)?;
    let warped = warp(colorized, &field)?;
    align_chroma_with(gray, &warped, luma)
}
