//! Image quality metrics: PSNR, SSIM, a feature-space perceptual distance,
//! FID, a text-image relevance score, and a batch report over two folders.

mod fid;
mod report;
mod ssim;

pub use fid::{fid, fid_from_moments, Moments};
pub use report::{run_report, Report, ReportConfig, ReportRow, ReportSummary};
pub use ssim::{ssim, ssim_plane, ssim_with, SsimConfig};

use crate::error::{Error, Result};
use crate::guidance::{cosine, GuidanceBackend, ToyGuidance};
use crate::image::ColorImage;

/// Identical images (MSE below this) are reported at [`PSNR_CAP_DB`].
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same(a: &ColorImage, b: &ColorImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::SizeMismatch { a: a.dims(), b: b.dims() });
    }
    Ok(())
}

pub fn mse(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(max²/MSE)`, capped at 100 dB.
pub fn psnr(a: &ColorImage, b: &ColorImage, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP_DB))
}

/// Image → fixed-length feature vector, made of `dim / block_len` blocks
/// that are normalized separately by [`lpips_like`].
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;

    fn block_len(&self) -> usize {
        self.dim()
    }

    fn extract(&self, img: &ColorImage) -> Result<Vec<f64>>;
}

/// Toy guidance concept activations on a `grid × grid` tiling of the image,
/// one block per tile.
#[derive(Debug, Clone)]
pub struct ToyFeatures {
    guidance: ToyGuidance,
    grid: usize,
}

impl ToyFeatures {
    pub const DEFAULT_GRID: usize = 2;

    pub fn new(guidance: ToyGuidance) -> Self {
        Self::with_grid(guidance, Self::DEFAULT_GRID)
    }

    pub fn with_grid(guidance: ToyGuidance, grid: usize) -> Self {
        Self { guidance, grid: grid.max(1) }
    }

    fn per_tile(&self) -> usize {
        crate::guidance::CONCEPTS.len()
    }
}

impl FeatureExtractor for ToyFeatures {
    fn dim(&self) -> usize {
        self.grid * self.grid * self.per_tile()
    }

    fn block_len(&self) -> usize {
        self.per_tile()
    }

    fn extract(&self, img: &ColorImage) -> Result<Vec<f64>> {
        let (w, h) = img.dims();
        let g = self.grid;
        if w < g || h < g {
            return Err(Error::TooSmall { side: w.min(h), window: g });
        }
        let mut out = Vec::with_capacity(self.dim());
        for ty in 0..g {
            for tx in 0..g {
                let (x0, x1) = (tx * w / g, (tx + 1) * w / g);
                let (y0, y1) = (ty * h / g, (ty + 1) * h / g);
                let tile = ColorImage::from_fn(x1 - x0, y1 - y0, |x, y| img.get(x0 + x, y0 + y))?;
                out.extend(self.guidance.image_features(&tile));
            }
        }
        Ok(out)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Mean over blocks of `‖â − b̂‖²`, each block scaled to unit length.
pub fn feature_distance(fa: &[f64], fb: &[f64], block_len: usize) -> Result<f64> {
    if fa.len() != fb.len() {
        return Err(Error::DimensionMismatch { expected: fa.len(), actual: fb.len() });
    }
    if block_len == 0 || fa.len() % block_len != 0 {
        return Err(Error::Config(format!("feature length {} is not a multiple of block {block_len}", fa.len())));
    }
    let blocks = fa.len() / block_len;
    let total: f64 = fa
        .chunks(block_len)
        .zip(fb.chunks(block_len))
        .map(|(a, b)| unit(a).iter().zip(unit(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(total / blocks as f64)
}

/// Perceptual distance in the extractor's feature space.
pub fn lpips_like<F: FeatureExtractor + ?Sized>(a: &ColorImage, b: &ColorImage, extractor: &F) -> Result<f64> {
    check_same(a, b)?;
    feature_distance(&extractor.extract(a)?, &extractor.extract(b)?, extractor.block_len())
}

/// `100 × mean max(0, cos)` over paired embeddings.
pub fn clip_score_embeddings(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples(0));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += cosine(a, b)?.max(0.0);
    }
    Ok(100.0 * total / pairs.len() as f64)
}

/// Text-image relevance of each image to its prompt.
pub fn clip_score<G: GuidanceBackend + ?Sized>(images: &[ColorImage], prompts: &[String], guidance: &G) -> Result<f64> {
    if images.len() != prompts.len() {
        return Err(Error::LengthMismatch(images.len(), prompts.len()));
    }
    let img: Vec<_> = images.iter().map(|i| guidance.encode_image(i)).collect::<Result<_>>()?;
    let txt: Vec<_> = prompts.iter().map(|p| guidance.encode_text(p)).collect();
    let pairs: Vec<(&[f64], &[f64])> = img.iter().zip(&txt).map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    clip_score_embeddings(&pairs)
}
