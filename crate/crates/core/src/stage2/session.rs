use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    default_eta_grid, finetune_for_reconstruction, interpolate, optimize_embedding, Phase, PromptSet, Stage2Config,
    Stage2LogEntry,
};
use crate::align::{align, AlignConfig};
use crate::diffusion::{ddim_invert, ddim_sample, Checkpoint, CheckpointFile, DiffusionBackend, GuidedDenoiser, Latent};
use crate::embedding::TextEmbedding;
use crate::error::{Error, Result};
use crate::guidance::GuidanceBackend;
use crate::image::{ColorImage, GrayImage};
use crate::rng::Rng;
use crate::stage1::{decode_to, encode_gray};

pub const MANIFEST: &str = "session.json";
const FORMAT: u32 = 1;
const FILES: [&str; 8] = [
    "gray.png",
    "primary.png",
    "reconstruction.png",
    "prompt.json",
    "e_opt.bin",
    "reference.ckpt",
    "finetuned.ckpt",
    "log.jsonl",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Building,
    Ready,
}

/// Contents of `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub format: u32,
    pub id: String,
    pub status: SessionStatus,
    pub width: usize,
    pub height: usize,
    pub context: String,
    pub rewritten: String,
    pub objects: Vec<String>,
    pub guidance_fingerprint: String,
    pub config: Stage2Config,
    pub align: AlignConfig,
    /// SHA-256 of every other file in the directory.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub target_prompt: String,
    pub eta: f64,
    pub seed: u64,
    /// Decoded sample before alignment.
    pub raw: ColorImage,
    pub image: ColorImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub eta: f64,
    pub seed: u64,
    pub image: ColorImage,
}

/// A built edit session: the inputs, the optimized embedding, and the
/// reference and fine-tuned denoisers. Rendering never trains.
#[derive(Debug, Clone)]
pub struct EditSession<B> {
    pub id: String,
    pub gray: GrayImage,
    pub primary: ColorImage,
    pub prompts: PromptSet,
    pub e_opt: TextEmbedding,
    pub reference: B,
    pub finetuned: B,
    pub config: Stage2Config,
    pub align: AlignConfig,
    pub reconstruction: ColorImage,
    pub log: Vec<Stage2LogEntry>,
    guidance_fingerprint: u64,
    z_gray: Latent,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl<B: DiffusionBackend> EditSession<B> {
    /// Optimizes `e_opt` on `primary`, fine-tunes a copy of `backend`, and
    /// renders the `η = 0` reconstruction.
    ///
    /// Both images are quantized to 8 bits first so a saved session
    /// reproduces the same renders after reloading.
    #[allow(clippy::too_many_arguments)]
    pub fn build<G: GuidanceBackend + ?Sized>(
        id: &str,
        primary: &ColorImage,
        gray: &GrayImage,
        prompts: PromptSet,
        backend: &B,
        guidance: &G,
        config: &Stage2Config,
        align: &AlignConfig,
        mut on_step: impl FnMut(&Stage2LogEntry),
    ) -> Result<Self>
    where
        B: Clone,
    {
        config.validate()?;
        if primary.dims() != gray.dims() {
            return Err(Error::SizeMismatch { a: primary.dims(), b: gray.dims() });
        }
        let dim = backend.info().embedding_dim;
        if guidance.embedding_dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: guidance.embedding_dim() });
        }
        let primary = primary.quantized();
        let gray = gray.quantized();
        let info = backend.info();
        let z0 = backend.encode(&primary.resized(info.image_width, info.image_height)?)?;

        let init = guidance.encode_text(&prompts.rewritten);
        let (e_opt, mut log) = optimize_embedding(
            backend,
            &z0,
            &init,
            config.embed_steps,
            config.embed_lr,
            config.seed,
            &config.adam,
            &mut on_step,
        )?;
        let (finetuned, ft_log) = finetune_for_reconstruction(
            backend,
            &z0,
            &e_opt,
            config.finetune_steps,
            config.finetune_lr,
            config.seed.wrapping_add(1),
            &config.adam,
            config.grad_clip,
            &mut on_step,
        )?;
        log.extend(ft_log);

        let z_gray = encode_gray(backend, &gray)?;
        let mut session = Self {
            id: id.to_string(),
            gray,
            primary: primary.clone(),
            prompts,
            e_opt,
            reference: backend.clone(),
            finetuned,
            config: config.clone(),
            align: *align,
            reconstruction: primary,
            log,
            guidance_fingerprint: guidance.fingerprint(),
            z_gray,
        };
        let (_, aligned) = session.render_embedding(&session.finetuned, &session.e_opt, guidance, config.reconstruction_seed)?;
        session.reconstruction = aligned.quantized();
        Ok(session)
    }

    fn check_guidance<G: GuidanceBackend + ?Sized>(&self, guidance: &G) -> Result<()> {
        if guidance.fingerprint() != self.guidance_fingerprint {
            return Err(Error::Config("guidance backend differs from the one the session was built with".into()));
        }
        Ok(())
    }

    /// Inverts the gray latent with the reference weights, mixes in seeded
    /// noise, and samples with `tuned`. Returns the raw decode and its
    /// aligned version.
    fn render_embedding<G: GuidanceBackend + ?Sized>(
        &self,
        tuned: &B,
        emb: &TextEmbedding,
        guidance: &G,
        seed: u64,
    ) -> Result<(ColorImage, ColorImage)> {
        let schedule = self.reference.schedule();
        let steps = self.config.sample_steps;
        let mut z = ddim_invert(&self.reference, &self.z_gray, emb, steps, schedule)?;
        let gamma = self.config.renoise;
        if gamma > 0.0 {
            let eps = Latent::gaussian(z.shape(), &mut Rng::new(seed));
            z = z.axpby((1.0 - gamma).sqrt(), &eps, gamma.sqrt())?;
        }
        let uncond = guidance.encode_text("");
        let guided = GuidedDenoiser { inner: tuned, unconditional: &uncond, scale: self.config.guidance_scale };
        let z0 = ddim_sample(&guided, &z, emb, steps, schedule, 0.0)?;
        let raw = decode_to(tuned, &z0, self.gray.width(), self.gray.height())?;
        let aligned = align(&self.gray, &raw, &self.align)?;
        Ok((raw, aligned))
    }

    /// Renders `emb` without touching any gradient machinery.
    pub fn render<G: GuidanceBackend + ?Sized>(&self, emb: &TextEmbedding, guidance: &G, seed: u64) -> Result<ColorImage> {
        self.check_guidance(guidance)?;
        let before = (self.reference.gradient_evaluations(), self.finetuned.gradient_evaluations());
        let (_, image) = self.render_embedding(&self.finetuned, emb, guidance, seed)?;
        let after = (self.reference.gradient_evaluations(), self.finetuned.gradient_evaluations());
        if before != after {
            return Err(Error::BackendFrozenViolation("gradient evaluated during an edit".into()));
        }
        Ok(image)
    }

    /// The same render with the pre-fine-tune weights for sampling.
    pub fn render_reference<G: GuidanceBackend + ?Sized>(
        &self,
        emb: &TextEmbedding,
        guidance: &G,
        seed: u64,
    ) -> Result<ColorImage> {
        self.check_guidance(guidance)?;
        Ok(self.render_embedding(&self.reference, emb, guidance, seed)?.1)
    }

    /// Target-prompt embedding for `colors`, with an optional free-text suffix.
    pub fn target_embedding<G: GuidanceBackend + ?Sized>(
        &self,
        guidance: &G,
        colors: &BTreeMap<String, String>,
        suffix: &str,
    ) -> Result<(String, TextEmbedding)> {
        let target = super::prompt::with_suffix(&self.prompts.target(colors)?, suffix);
        let emb = guidance.encode_text(&target);
        Ok((target, emb))
    }

    /// Recolors toward `colors` at interpolation weight `eta`.
    pub fn edit<G: GuidanceBackend + ?Sized>(
        &self,
        guidance: &G,
        colors: &BTreeMap<String, String>,
        eta: f64,
        seed: u64,
    ) -> Result<EditOutput> {
        self.edit_with_suffix(guidance, colors, "", eta, seed)
    }

    pub fn edit_with_suffix<G: GuidanceBackend + ?Sized>(
        &self,
        guidance: &G,
        colors: &BTreeMap<String, String>,
        suffix: &str,
        eta: f64,
        seed: u64,
    ) -> Result<EditOutput> {
        self.check_guidance(guidance)?;
        let (target_prompt, e_tgt) = self.target_embedding(guidance, colors, suffix)?;
        let emb = interpolate(&self.e_opt, &e_tgt, eta)?;
        let before = (self.reference.gradient_evaluations(), self.finetuned.gradient_evaluations());
        let (raw, image) = self.render_embedding(&self.finetuned, &emb, guidance, seed)?;
        let after = (self.reference.gradient_evaluations(), self.finetuned.gradient_evaluations());
        if before != after {
            return Err(Error::BackendFrozenViolation("gradient evaluated during an edit".into()));
        }
        Ok(EditOutput { target_prompt, eta, seed, raw, image })
    }

    /// `count` edits over an η grid and seed list (defaults: [`default_eta_grid`]
    /// and seeds `0..count`).
    pub fn generate_variants<G: GuidanceBackend + ?Sized>(
        &self,
        guidance: &G,
        colors: &BTreeMap<String, String>,
        count: usize,
        eta_grid: Option<&[f64]>,
        seeds: Option<&[u64]>,
    ) -> Result<Vec<Variant>> {
        let grid = eta_grid.map(<[f64]>::to_vec).unwrap_or_else(|| default_eta_grid(count));
        let seeds = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| (0..count as u64).collect());
        if grid.len() < count || seeds.len() < count {
            return Err(Error::Config(format!(
                "{count} variants need as many η values and seeds, got {} and {}",
                grid.len(),
                seeds.len()
            )));
        }
        (0..count)
            .map(|i| {
                let out = self.edit(guidance, colors, grid[i], seeds[i])?;
                Ok(Variant { eta: grid[i], seed: seeds[i], image: out.image })
            })
            .collect()
    }

    /// What went into this session, as `(event, detail)` pairs.
    pub fn provenance(&self) -> Vec<(&'static str, serde_json::Value)> {
        let last = |phase| self.log.iter().rev().find(|e| e.phase == phase).map(|e| e.loss);
        vec![
            ("inputs", serde_json::json!({ "width": self.gray.width(), "height": self.gray.height(), "quantized_bits": 8 })),
            ("prompt_rewritten", serde_json::json!({ "context": self.prompts.context, "rewritten": self.prompts.rewritten })),
            (
                "embedding_optimized",
                serde_json::json!({ "steps": self.config.embed_steps, "lr": self.config.embed_lr, "final_loss": last(Phase::Embedding) }),
            ),
            (
                "finetuned",
                serde_json::json!({ "steps": self.config.finetune_steps, "lr": self.config.finetune_lr, "final_loss": last(Phase::Finetune) }),
            ),
            ("reconstruction_rendered", serde_json::json!({ "eta": 0.0, "seed": self.config.reconstruction_seed })),
            ("saved", serde_json::json!({ "id": self.id })),
        ]
    }

    pub fn manifest(&self) -> SessionManifest {
        SessionManifest {
            format: FORMAT,
            id: self.id.clone(),
            status: SessionStatus::Ready,
            width: self.gray.width(),
            height: self.gray.height(),
            context: self.prompts.context.clone(),
            rewritten: self.prompts.rewritten.clone(),
            objects: self.prompts.objects(),
            guidance_fingerprint: format!("{:016x}", self.guidance_fingerprint),
            config: self.config.clone(),
            align: self.align,
            files: BTreeMap::new(),
        }
    }
}

impl<B: DiffusionBackend + Checkpoint> EditSession<B> {
    /// Writes the session directory. `session.json` is written first with
    /// status `building` and rewritten as `ready` once every file is in place.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest();
        manifest.status = SessionStatus::Building;
        write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;

        let mut log = Vec::new();
        for entry in &self.log {
            serde_json::to_writer(&mut log, entry)?;
            log.push(b'\n');
        }
        let mut e_opt = Vec::new();
        self.e_opt.write_to(&mut e_opt).map_err(|e| Error::io(dir.join("e_opt.bin"), e))?;
        let contents: [(&str, Vec<u8>); 8] = [
            ("gray.png", gray_png(&self.gray)?),
            ("primary.png", self.primary.to_png_bytes()?),
            ("reconstruction.png", self.reconstruction.to_png_bytes()?),
            ("prompt.json", serde_json::to_vec_pretty(&self.prompts)?),
            ("e_opt.bin", e_opt),
            ("reference.ckpt", self.reference.to_checkpoint().to_bytes()?),
            ("finetuned.ckpt", self.finetuned.to_checkpoint().to_bytes()?),
            ("log.jsonl", log),
        ];
        for (name, bytes) in &contents {
            write(&dir.join(name), bytes)?;
            manifest.files.insert(name.to_string(), sha256_hex(bytes));
        }
        for (event, detail) in self.provenance() {
            append_provenance(dir, event, detail)?;
        }
        manifest.status = SessionStatus::Ready;
        write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
    }

    /// Reads a session directory written by [`save`](Self::save).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if manifest.status != SessionStatus::Ready {
            return Err(Error::SessionIncomplete(format!("{} is still building", dir.display())));
        }
        if manifest.format != FORMAT {
            return Err(Error::SessionIncomplete(format!("unsupported session format {}", manifest.format)));
        }
        let mut bytes = BTreeMap::new();
        for name in FILES {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::SessionIncomplete(format!("{name} is missing")));
            }
            let data = read(&path)?;
            if let Some(expected) = manifest.files.get(name) {
                if *expected != sha256_hex(&data) {
                    return Err(Error::ChecksumMismatch);
                }
            }
            bytes.insert(name, data);
        }
        let gray = GrayImage::load(dir.join("gray.png"))?;
        let primary = ColorImage::load(dir.join("primary.png"))?;
        let reconstruction = ColorImage::load(dir.join("reconstruction.png"))?;
        let prompts: PromptSet = serde_json::from_slice(&bytes["prompt.json"])?;
        let e_opt = TextEmbedding::read_from(bytes["e_opt.bin"].as_slice())?;
        let reference = B::from_checkpoint(CheckpointFile::from_bytes(&bytes["reference.ckpt"])?)?;
        let finetuned = B::from_checkpoint(CheckpointFile::from_bytes(&bytes["finetuned.ckpt"])?)?;
        let log = std::str::from_utf8(&bytes["log.jsonl"])
            .map_err(|_| Error::SessionIncomplete("log.jsonl is not UTF-8".into()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Stage2LogEntry>, _>>()?;
        let guidance_fingerprint = u64::from_str_radix(&manifest.guidance_fingerprint, 16)
            .map_err(|_| Error::SessionIncomplete("bad guidance fingerprint".into()))?;
        let z_gray = encode_gray(&reference, &gray)?;
        Ok(Self {
            id: manifest.id,
            gray,
            primary,
            prompts,
            e_opt,
            reference,
            finetuned,
            config: manifest.config,
            align: manifest.align,
            reconstruction,
            log,
            guidance_fingerprint,
            z_gray,
        })
    }
}

fn gray_png(img: &GrayImage) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.to_color().to_rgb8().chunks(3).map(|p| p[0]).collect();
    let mut out = std::io::Cursor::new(Vec::new());
    image::GrayImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer length matches dimensions")
        .write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Reads `session.json`; a missing file means the session was never finished.
pub fn read_manifest(dir: &Path) -> Result<SessionManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::SessionIncomplete(format!("{} has no {MANIFEST}", dir.display())));
    }
    Ok(serde_json::from_slice(&read(&path)?)?)
}

/// Appends one event line to `provenance.jsonl`.
pub fn append_provenance(dir: &Path, event: &str, detail: serde_json::Value) -> Result<()> {
    let path = dir.join("provenance.jsonl");
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let line = serde_json::json!({ "event": event, "detail": detail });
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}
