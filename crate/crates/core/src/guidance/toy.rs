//! Deterministic stand-in for a CLIP text/image encoder pair.
//!
//! Both encoders produce a vector of named *concept* activations (grayness,
//! colorfulness, texture, brightness, eight hue bins) which a fixed random
//! orthonormal map lifts into the embedding space. The text side adds
//! seeded token-hash slots for words outside the concept vocabulary; the image
//! side computes soft hue histograms over an opponent color plane, so image
//! embeddings are differentiable in the pixels and a gray image lands close
//! to "A grayscale photograph.".

use serde::{Deserialize, Serialize};

use super::{GuidanceBackend, TextEmbedding};
use crate::error::{Error, Result};
use crate::image::ColorImage;
use crate::rng::Rng;

/// Names of the concept slots, in feature order.
pub const CONCEPTS: [&str; 13] = [
    "gray", "colorful", "texture", "bright", "dark", "red", "orange", "yellow", "green", "cyan", "blue", "purple",
    "pink",
];

const GRAY: usize = 0;
const COLORFUL: usize = 1;
const TEXTURE: usize = 2;
const BRIGHT: usize = 3;
const DARK: usize = 4;
const HUE0: usize = 5;
const N_CONCEPTS: usize = CONCEPTS.len();

/// Hue bin centers in degrees on the opponent plane (red at 0°, yellow 60°,
/// green 120°, blue 240°).
const HUE_CENTERS: [f64; 8] = [0.0, 30.0, 60.0, 120.0, 180.0, 240.0, 275.0, 330.0];
const HUE_SHARPNESS: i32 = 6;
const CHROMA_EPS: f64 = 1e-3;
const GRAY_SCALE: f64 = 0.1;
const TEXTURE_GAIN: f64 = 4.0;
const SQRT3_2: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyGuidanceConfig {
    pub seed: u64,
    pub embedding_dim: usize,
    /// Number of hashed slots for out-of-vocabulary words.
    pub hash_slots: usize,
    pub text_gain: f64,
    pub image_gain: f64,
    /// Weight of an out-of-vocabulary word relative to a concept word.
    pub hashed_weight: f64,
}

impl Default for ToyGuidanceConfig {
    fn default() -> Self {
        Self { seed: 0x00C0_FFEE, embedding_dim: 64, hash_slots: 32, text_gain: 3.0, image_gain: 3.0, hashed_weight: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct ToyGuidance {
    config: ToyGuidanceConfig,
    /// `dim × (concepts + hash_slots)`, orthonormal columns, row-major.
    projection: Vec<f64>,
    fingerprint: u64,
}

fn fnv1a(seed: u64, s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased word tokens; bracketed identifiers such as `[*]` stay whole.
pub(crate) fn tokenize(prompt: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_bracket = false;
    for ch in prompt.chars() {
        if in_bracket {
            cur.push(ch);
            if ch == ']' {
                out.push(std::mem::take(&mut cur));
                in_bracket = false;
            }
        } else if ch == '[' {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            cur.push(ch);
            in_bracket = true;
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Concept activations of a vocabulary word.
fn concept_weights(word: &str) -> Option<&'static [(usize, f64)]> {
    Some(match word {
        "gray" | "grey" | "grayscale" | "greyscale" | "monochrome" | "monochromatic" | "colorless" | "desaturated"
        | "achromatic" => &[(GRAY, 1.0)],
        "colorful" | "colourful" | "vivid" | "vibrant" | "colored" | "colorized" | "saturated" => &[(COLORFUL, 1.0)],
        "scratch" | "scratches" | "scratched" | "noise" | "noisy" | "grain" | "grainy" | "damaged" | "dusty" => {
            &[(TEXTURE, 1.0)]
        }
        "bright" | "light" => &[(BRIGHT, 1.0)],
        "white" => &[(BRIGHT, 1.0), (GRAY, 0.5)],
        "dark" => &[(DARK, 1.0)],
        "black" => &[(DARK, 1.0), (GRAY, 0.5)],
        "red" | "crimson" | "scarlet" => &[(HUE0, 1.0)],
        "orange" => &[(HUE0 + 1, 1.0)],
        "yellow" | "golden" | "gold" => &[(HUE0 + 2, 1.0)],
        "green" => &[(HUE0 + 3, 1.0)],
        "cyan" | "teal" | "turquoise" => &[(HUE0 + 4, 1.0)],
        "blue" | "navy" => &[(HUE0 + 5, 1.0)],
        "purple" | "violet" => &[(HUE0 + 6, 1.0)],
        "pink" | "magenta" => &[(HUE0 + 7, 1.0)],
        "brown" => &[(HUE0 + 1, 0.6), (DARK, 0.6)],
        _ => return None,
    })
}

/// Per-image intermediate values reused by the backward pass.
struct PixelTerms {
    a: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
    luma: Vec<f64>,
}

impl ToyGuidance {
    pub fn new(config: ToyGuidanceConfig) -> Result<Self> {
        let cols = N_CONCEPTS + config.hash_slots;
        if config.embedding_dim < cols {
            return Err(Error::Config(format!(
                "toy guidance needs embedding_dim >= {cols} (concepts + hash slots)"
            )));
        }
        let mut rng = Rng::new(config.seed);
        let g = nalgebra::DMatrix::from_fn(config.embedding_dim, cols, |_, _| rng.normal());
        let q = g.qr().q();
        let mut projection = vec![0.0; config.embedding_dim * cols];
        for r in 0..config.embedding_dim {
            for c in 0..cols {
                projection[r * cols + c] = q[(r, c)];
            }
        }
        let fingerprint = fnv1a(config.seed, &serde_json::to_string(&config).expect("config serializes"));
        Ok(Self { config, projection, fingerprint })
    }

    pub fn config(&self) -> &ToyGuidanceConfig {
        &self.config
    }

    fn cols(&self) -> usize {
        N_CONCEPTS + self.config.hash_slots
    }

    fn lift(&self, slots: &[f64], gain: f64) -> Vec<f64> {
        let cols = self.cols();
        (0..self.config.embedding_dim)
            .map(|r| gain * self.projection[r * cols..(r + 1) * cols].iter().zip(slots).map(|(p, s)| p * s).sum::<f64>())
            .collect()
    }

    /// Transpose of [`lift`](Self::lift) restricted to the concept slots.
    fn lift_transpose(&self, grad: &[f64], gain: f64) -> Vec<f64> {
        let cols = self.cols();
        (0..N_CONCEPTS)
            .map(|c| gain * (0..self.config.embedding_dim).map(|r| self.projection[r * cols + c] * grad[r]).sum::<f64>())
            .collect()
    }

    /// Slot activations of a prompt: concept words plus hashed other words.
    pub fn text_slots(&self, prompt: &str) -> Vec<f64> {
        let mut slots = vec![0.0; self.cols()];
        for tok in tokenize(prompt) {
            match concept_weights(&tok) {
                Some(ws) => {
                    for &(i, w) in ws {
                        slots[i] += w;
                    }
                }
                None => {
                    let h = fnv1a(self.config.seed, &tok) as usize % self.config.hash_slots;
                    slots[N_CONCEPTS + h] += self.config.hashed_weight;
                }
            }
        }
        slots
    }

    fn pixel_terms(img: &ColorImage) -> PixelTerms {
        let n = img.pixel_count();
        let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
        let mut terms = PixelTerms { a: vec![0.0; n], b: vec![0.0; n], s: vec![0.0; n], luma: vec![0.0; n] };
        for i in 0..n {
            let a = r[i] - 0.5 * (g[i] + b[i]);
            let bb = SQRT3_2 * (g[i] - b[i]);
            terms.a[i] = a;
            terms.b[i] = bb;
            terms.s[i] = (a * a + bb * bb + CHROMA_EPS * CHROMA_EPS).sqrt();
            terms.luma[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
        }
        terms
    }

    fn laplacian(luma: &[f64], w: usize, h: usize, x: usize, y: usize) -> f64 {
        let at = |xx: usize, yy: usize| luma[yy * w + xx];
        4.0 * at(x, y)
            - at(x.saturating_sub(1), y)
            - at((x + 1).min(w - 1), y)
            - at(x, y.saturating_sub(1))
            - at(x, (y + 1).min(h - 1))
    }

    /// Raw concept activations of an image (no projection or gain).
    pub fn image_features(&self, img: &ColorImage) -> Vec<f64> {
        let t = Self::pixel_terms(img);
        let n = img.pixel_count() as f64;
        let (w, h) = img.dims();
        let mut f = vec![0.0; N_CONCEPTS];
        let mean_s = t.s.iter().sum::<f64>() / n;
        let mean_y = t.luma.iter().sum::<f64>() / n;
        f[GRAY] = (-mean_s / GRAY_SCALE).exp();
        f[COLORFUL] = mean_s;
        f[BRIGHT] = mean_y;
        f[DARK] = 1.0 - mean_y;
        let mut tex = 0.0;
        for y in 0..h {
            for x in 0..w {
                tex += Self::laplacian(&t.luma, w, h, x, y).abs();
            }
        }
        f[TEXTURE] = TEXTURE_GAIN * tex / n;
        for (k, deg) in HUE_CENTERS.iter().enumerate() {
            let (sn, cs) = deg.to_radians().sin_cos();
            let mut acc = 0.0;
            for i in 0..t.a.len() {
                let d = t.a[i] * cs + t.b[i] * sn;
                if d > 0.0 {
                    acc += d.powi(HUE_SHARPNESS) / t.s[i].powi(HUE_SHARPNESS - 1);
                }
            }
            f[HUE0 + k] = acc / n;
        }
        f
    }

    /// Pullback of [`image_features`](Self::image_features).
    pub fn image_features_vjp(&self, img: &ColorImage, gf: &[f64]) -> Vec<f64> {
        let t = Self::pixel_terms(img);
        let npx = img.pixel_count();
        let n = npx as f64;
        let (w, h) = img.dims();
        let mut ga = vec![0.0; npx];
        let mut gb = vec![0.0; npx];
        let mut gy = vec![0.0; npx];

        let mean_s = t.s.iter().sum::<f64>() / n;
        let gray = (-mean_s / GRAY_SCALE).exp();
        // ∂/∂s_i of the two chroma-mean features
        let gs_common = (gf[COLORFUL] - gf[GRAY] * gray / GRAY_SCALE) / n;
        for i in 0..npx {
            ga[i] += gs_common * t.a[i] / t.s[i];
            gb[i] += gs_common * t.b[i] / t.s[i];
            gy[i] += (gf[BRIGHT] - gf[DARK]) / n;
        }
        let gtex = gf[TEXTURE] * TEXTURE_GAIN / n;
        if gtex != 0.0 {
            for y in 0..h {
                for x in 0..w {
                    let sign = Self::laplacian(&t.luma, w, h, x, y).signum();
                    if Self::laplacian(&t.luma, w, h, x, y) == 0.0 {
                        continue;
                    }
                    let g = gtex * sign;
                    gy[y * w + x] += 4.0 * g;
                    gy[y * w + x.saturating_sub(1)] -= g;
                    gy[y * w + (x + 1).min(w - 1)] -= g;
                    gy[y.saturating_sub(1) * w + x] -= g;
                    gy[(y + 1).min(h - 1) * w + x] -= g;
                }
            }
        }
        let p = HUE_SHARPNESS;
        for (k, deg) in HUE_CENTERS.iter().enumerate() {
            let gk = gf[HUE0 + k] / n;
            if gk == 0.0 {
                continue;
            }
            let (sn, cs) = deg.to_radians().sin_cos();
            for i in 0..npx {
                let d = t.a[i] * cs + t.b[i] * sn;
                if d <= 0.0 {
                    continue;
                }
                let s = t.s[i];
                // c = d^p / s^(p-1)
                let dc_dd = f64::from(p) * d.powi(p - 1) / s.powi(p - 1);
                let dc_ds = -f64::from(p - 1) * d.powi(p) / s.powi(p);
                ga[i] += gk * (dc_dd * cs + dc_ds * t.a[i] / s);
                gb[i] += gk * (dc_dd * sn + dc_ds * t.b[i] / s);
            }
        }

        let mut grad = vec![0.0; 3 * npx];
        for i in 0..npx {
            grad[i] = ga[i] + 0.299 * gy[i];
            grad[npx + i] = -0.5 * ga[i] + SQRT3_2 * gb[i] + 0.587 * gy[i];
            grad[2 * npx + i] = -0.5 * ga[i] - SQRT3_2 * gb[i] + 0.114 * gy[i];
        }
        grad
    }
}

impl GuidanceBackend for ToyGuidance {
    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn encode_text(&self, prompt: &str) -> TextEmbedding {
        TextEmbedding::new(self.lift(&self.text_slots(prompt), self.config.text_gain))
            .unwrap_or_else(|_| TextEmbedding::zeros(self.config.embedding_dim))
    }

    fn encode_image(&self, img: &ColorImage) -> Result<TextEmbedding> {
        let mut slots = self.image_features(img);
        slots.resize(self.cols(), 0.0);
        TextEmbedding::new(self.lift(&slots, self.config.image_gain))
    }

    fn encode_image_vjp(&self, img: &ColorImage, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.config.embedding_dim {
            return Err(Error::DimensionMismatch { expected: self.config.embedding_dim, actual: grad.len() });
        }
        let gf = self.lift_transpose(grad, self.config.image_gain);
        Ok(self.image_features_vjp(img, &gf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{contrastive_loss, cosine};

    fn guidance() -> ToyGuidance {
        ToyGuidance::new(ToyGuidanceConfig::default()).unwrap()
    }

    #[test]
    fn tokenizer_keeps_identifiers() {
        assert_eq!(tokenize("A [*] dog, on a Wooden-bench."), vec!["a", "[*]", "dog", "on", "a", "wooden", "bench"]);
        assert_eq!(tokenize("[*2]red"), vec!["[*2]", "red"]);
    }

    #[test]
    fn gray_image_sits_near_grayscale_prompt() {
        let g = guidance();
        let gray = ColorImage::filled(16, 16, [0.4, 0.4, 0.4]).unwrap();
        let red = ColorImage::filled(16, 16, [0.85, 0.12, 0.1]).unwrap();
        let neg = g.encode_text("A grayscale photograph.");
        let ctx = g.encode_text("A red square.");
        let eg = g.encode_image(&gray).unwrap();
        let er = g.encode_image(&red).unwrap();
        assert!(eg.dot(&neg) > eg.dot(&ctx));
        assert!(er.dot(&ctx) > er.dot(&neg));
        let lg = contrastive_loss(eg.as_slice(), ctx.as_slice(), &[neg.as_slice()]).unwrap();
        let lr = contrastive_loss(er.as_slice(), ctx.as_slice(), &[neg.as_slice()]).unwrap();
        assert!(lr < lg);
        assert!(cosine(er.as_slice(), ctx.as_slice()).unwrap() > cosine(eg.as_slice(), ctx.as_slice()).unwrap());
    }

    #[test]
    fn hue_bins_follow_named_colors() {
        let g = guidance();
        for (rgb, name) in [
            ([0.9, 0.1, 0.1], "red"),
            ([0.9, 0.85, 0.1], "yellow"),
            ([0.1, 0.7, 0.2], "green"),
            ([0.1, 0.2, 0.9], "blue"),
        ] {
            let f = g.image_features(&ColorImage::filled(8, 8, rgb).unwrap());
            let best = (HUE0..N_CONCEPTS).max_by(|&i, &j| f[i].total_cmp(&f[j])).unwrap();
            assert_eq!(CONCEPTS[best], name);
        }
    }

    #[test]
    fn image_encoder_gradient_matches_finite_differences() {
        let g = guidance();
        let mut rng = Rng::new(21);
        let img = ColorImage::from_fn(9, 8, |_, _| [rng.range(0.1, 0.9), rng.range(0.1, 0.9), rng.range(0.1, 0.9)]).unwrap();
        let probe = Rng::new(3).normal_vec(g.embedding_dim());
        let f = |im: &ColorImage| g.encode_image(im).unwrap().as_slice().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        let grad = g.encode_image_vjp(&img, &probe).unwrap();
        let h = 1e-6;
        for i in (0..img.data().len()).step_by(5) {
            let mut d = img.data().to_vec();
            d[i] += h;
            let up = f(&ColorImage::new(9, 8, d.clone()).unwrap());
            d[i] -= 2.0 * h;
            let dn = f(&ColorImage::new(9, 8, d).unwrap());
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5 * (1.0 + fd.abs()), "sample {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn identifier_changes_text_embedding() {
        let g = guidance();
        assert_ne!(g.encode_text("A dog."), g.encode_text("A [*] dog."));
        assert_eq!(g.encode_text("A dog."), g.encode_text("a   DOG"));
    }
}
