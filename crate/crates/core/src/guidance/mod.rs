//! Text/image encoder contract and the contrastive color-guidance loss.
//!
//! The loss is a softmax cross-entropy over image–text logits with the
//! context prompt as the positive class and "anti-color" prompts (for example
//! "A grayscale photograph.") as negatives:
//!
//! ```text
//! L = −log( exp(eᵀe⁺) / (exp(eᵀe⁺) + Σᵢ exp(eᵀeᵢ⁻)) )
//! ```
//!
//! Logits are raw dot products by default. [`LogitMode::Cosine`] switches to
//! temperature-scaled cosine similarity for encoders whose embedding norms
//! are large.

mod toy;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::embedding::TextEmbedding;
pub use toy::{ToyGuidance, ToyGuidanceConfig, CONCEPTS};

use crate::error::{Error, Result};
use crate::image::ColorImage;

/// Pre-trained text and image encoders sharing one embedding space.
pub trait GuidanceBackend: Send + Sync {
    fn embedding_dim(&self) -> usize;

    /// Changes whenever the encoders' weights change; used to invalidate
    /// cached embeddings.
    fn fingerprint(&self) -> u64;

    fn encode_text(&self, prompt: &str) -> TextEmbedding;

    fn encode_image(&self, img: &ColorImage) -> Result<TextEmbedding>;

    /// Pullback of [`encode_image`](Self::encode_image): `∂L/∂e` to
    /// `∂L/∂image` (planar RGB).
    fn encode_image_vjp(&self, img: &ColorImage, grad: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LogitMode {
    /// `eᵀv`, no normalization.
    #[default]
    Dot,
    /// `cos(e, v) / temperature`.
    Cosine { temperature: f64 },
}

fn check_dims(e: &[f64], vs: &[&[f64]]) -> Result<()> {
    for v in vs {
        if v.len() != e.len() {
            return Err(Error::DimensionMismatch { expected: e.len(), actual: v.len() });
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable `log Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Contrastive loss with raw dot-product logits.
pub fn contrastive_loss(e: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Result<f64> {
    Ok(contrastive_loss_with_grad(e, positive, negatives, LogitMode::Dot)?.0)
}

/// Contrastive loss and its gradient with respect to the image embedding `e`.
pub fn contrastive_loss_with_grad(
    e: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    mode: LogitMode,
) -> Result<(f64, Vec<f64>)> {
    if negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    check_dims(e, &[positive])?;
    check_dims(e, negatives)?;

    let classes: Vec<&[f64]> = std::iter::once(positive).chain(negatives.iter().copied()).collect();
    let (logits, dlogit_de): (Vec<f64>, Vec<Vec<f64>>) = match mode {
        LogitMode::Dot => classes.iter().map(|v| (dot(e, v), v.to_vec())).unzip(),
        LogitMode::Cosine { temperature } => {
            let ne = norm(e);
            if ne == 0.0 {
                return Err(Error::ZeroVector);
            }
            let mut logits = Vec::with_capacity(classes.len());
            let mut grads = Vec::with_capacity(classes.len());
            for v in &classes {
                let nv = norm(v);
                if nv == 0.0 {
                    return Err(Error::ZeroVector);
                }
                let c = dot(e, v) / (ne * nv);
                logits.push(c / temperature);
                // ∂cos/∂e = v/(|e||v|) − cos·e/|e|²
                grads.push(
                    v.iter().zip(e).map(|(vi, ei)| (vi / (ne * nv) - c * ei / (ne * ne)) / temperature).collect(),
                );
            }
            (logits, grads)
        }
    };

    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];
    let mut grad = vec![0.0; e.len()];
    for (j, g) in dlogit_de.iter().enumerate() {
        let w = (logits[j] - lse).exp() - if j == 0 { 1.0 } else { 0.0 };
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += w * gi;
        }
    }
    Ok((loss, grad))
}

/// `L_LDM + λ·L_CST`.
pub fn combined_loss(ldm: f64, cst: f64, lambda: f64) -> f64 {
    ldm + lambda * cst
}

/// Cosine similarity between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, &[b])?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Cosine similarity of the image and prompt embeddings.
pub fn image_text_alignment<G: GuidanceBackend + ?Sized>(img: &ColorImage, prompt: &str, backend: &G) -> Result<f64> {
    let ei = backend.encode_image(img)?;
    let et = backend.encode_text(prompt);
    cosine(ei.as_slice(), et.as_slice())
}

/// Default anti-color prompts.
pub const DEFAULT_NEGATIVES: [&str; 2] = ["A grayscale photograph.", "A picture with scratches."];

/// Ordered negative prompts with embeddings cached per encoder fingerprint.
#[derive(Debug, Clone)]
pub struct NegativePromptSet {
    prompts: Vec<String>,
    cache: Option<(u64, Vec<TextEmbedding>)>,
}

impl Default for NegativePromptSet {
    fn default() -> Self {
        Self::new(DEFAULT_NEGATIVES.iter().map(|s| s.to_string()).collect()).expect("defaults are non-empty")
    }
}

impl NegativePromptSet {
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::EmptyNegatives);
        }
        Ok(Self { prompts, cache: None })
    }

    /// Reads a JSON array of strings.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Embeddings for the current encoder, recomputed only when its
    /// fingerprint changes.
    pub fn embeddings<G: GuidanceBackend + ?Sized>(&mut self, backend: &G) -> &[TextEmbedding] {
        let fp = backend.fingerprint();
        if self.cache.as_ref().map(|(f, _)| *f) != Some(fp) {
            let embs = self.prompts.iter().map(|p| backend.encode_text(p)).collect();
            self.cache = Some((fp, embs));
        }
        &self.cache.as_ref().expect("cache filled above").1
    }
}
