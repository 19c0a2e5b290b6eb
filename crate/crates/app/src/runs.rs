//! Writing Stage-1 runs to disk. Shared by the CLI and the service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffcolor::align::align;
use diffcolor::diffusion::toy::ToyModels;
use diffcolor::guidance::{image_text_alignment, GuidanceBackend};
use diffcolor::stage1::{colorize_stage1, TrainLogEntry};
use diffcolor::{replicate_gray, Error, GrayImage, PipelineConfig, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PRIMARY: &str = "x_pri.png";
pub const ALIGNED: &str = "x_pri_aligned.png";
pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Contents of `manifest.json` for a Stage-1 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub prompt: String,
    pub negatives: Vec<String>,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub guidance_fingerprint: String,
    /// Text-image alignment of the gray input and of the aligned result.
    pub alignment_before: f64,
    pub alignment_after: f64,
    pub final_loss: Option<TrainLogEntry>,
    /// SHA-256 of each artifact.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs Stage 1 and alignment on `gray`, writing every artifact into `out`.
pub fn colorize_to_dir(
    gray: &GrayImage,
    prompt: &str,
    config: &PipelineConfig,
    models: &ToyModels,
    out: &Path,
    on_step: impl FnMut(&TrainLogEntry),
) -> Result<RunManifest> {
    config.validate()?;
    if prompt.trim().is_empty() {
        return Err(Error::Config("prompt is empty".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut negatives = config.negative_set()?;
    let run = colorize_stage1(gray, prompt, &mut negatives, &config.stage1, &models.backend, &models.guidance, on_step)?;
    let aligned = align(gray, &run.primary, &config.align)?;

    let mut log = Vec::new();
    for entry in &run.log {
        serde_json::to_writer(&mut log, entry)?;
        log.push(b'\n');
    }
    let contents = [
        (PRIMARY, run.primary.to_png_bytes()?),
        (ALIGNED, aligned.to_png_bytes()?),
        (TRAINING_LOG, log),
        (EFFECTIVE_CONFIG, config.to_json()?.into_bytes()),
    ];
    let mut files = BTreeMap::new();
    for (name, bytes) in &contents {
        write_file(&out.join(name), bytes)?;
        files.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = RunManifest {
        kind: "stage1".into(),
        prompt: prompt.to_string(),
        negatives: config.negatives.clone(),
        seed: config.stage1.seed,
        width: gray.width(),
        height: gray.height(),
        guidance_fingerprint: format!("{:016x}", models.guidance.fingerprint()),
        alignment_before: image_text_alignment(&replicate_gray(gray), prompt, &models.guidance)?,
        alignment_after: image_text_alignment(&aligned, prompt, &models.guidance)?,
        final_loss: run.log.last().copied(),
        files,
    };
    write_file(&out.join(RUN_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Paths of the artifacts a run writes, manifest included.
pub fn artifact_paths(out: &Path) -> Vec<PathBuf> {
    [PRIMARY, ALIGNED, TRAINING_LOG, RUN_MANIFEST, EFFECTIVE_CONFIG].iter().map(|n| out.join(n)).collect()
}
