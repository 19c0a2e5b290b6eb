//! Desk-scale latent diffusion backend.
//!
//! A convolutional autoencoder maps 32×32 RGB images to 4×8×8 latents, and a
//! small conditional denoiser predicts noise from `(z_t, t, embedding)` using a
//! sinusoidal timestep code and embedding-driven feature modulation (a
//! per-channel scale and shift after each hidden convolution). Weights come
//! from a seeded, fixed pre-training routine on procedurally generated
//! colored-shapes images; [`pretrained`] caches the result in memory and on
//! disk so the routine runs once per machine.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, CheckpointFile, CheckpointHeader, TensorEntry, FORMAT_VERSION};
use super::{
    add_noise, mse_with_grad, BackendInfo, DenoiseGrads, Denoiser, DiffusionBackend, Latent, LatentShape,
    NoiseSchedule, ScheduleConfig, Wrt,
};
use crate::embedding::TextEmbedding;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceBackend, ToyGuidance, ToyGuidanceConfig};
use crate::image::{rgb_to_gray, replicate_gray, ColorImage};
use crate::nn::{
    depth_to_space, silu, silu_backward, silu_map, silu_map_backward, sinusoidal, space_to_depth, Adam, Conv2d, Linear,
    Map, ParamAlloc,
};
use crate::rng::Rng;
use crate::synthetic;

/// Bumped whenever pre-training changes, so stale disk caches are ignored.
const PRETRAIN_REVISION: u32 = 3;
const PATCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub image_size: usize,
    pub latent_channels: usize,
    pub ae_hidden: usize,
    pub denoiser_hidden: usize,
    pub time_features: usize,
    pub cond_hidden: usize,
    pub schedule: ScheduleConfig,
    pub guidance: ToyGuidanceConfig,
    pub dataset_size: usize,
    pub pretrain_steps: usize,
    pub batch: usize,
    pub ae_lr: f64,
    pub denoiser_lr: f64,
    /// Probability of training the denoiser on the empty-prompt embedding.
    pub cond_dropout: f64,
    /// Probability of showing the autoencoder a gray-replicated image.
    pub gray_fraction: f64,
    pub reconstruction_floor_db: f64,
    pub inversion_tolerance: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 32,
            latent_channels: 4,
            ae_hidden: 32,
            denoiser_hidden: 32,
            time_features: 16,
            cond_hidden: 64,
            schedule: ScheduleConfig::default(),
            guidance: ToyGuidanceConfig::default(),
            dataset_size: 256,
            pretrain_steps: 2000,
            batch: 4,
            ae_lr: 3e-3,
            denoiser_lr: 1e-3,
            cond_dropout: 0.1,
            gray_fraction: 0.25,
            reconstruction_floor_db: 25.0,
            inversion_tolerance: 3.5,
        }
    }
}

impl ToyConfig {
    pub fn embedding_dim(&self) -> usize {
        self.guidance.embedding_dim
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(self.latent_channels, self.image_size / PATCH, self.image_size / PATCH)
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % PATCH != 0 {
            return Err(Error::Config(format!("toy image_size must be a multiple of {PATCH} and >= 8")));
        }
        if self.latent_channels == 0 || self.ae_hidden == 0 || self.denoiser_hidden == 0 || self.batch == 0 {
            return Err(Error::Config("toy network sizes and batch must be positive".into()));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::Config("toy time_features must be even and positive".into()));
        }
        Ok(())
    }

    fn cache_key(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(format!("rev{PRETRAIN_REVISION}:{json}").as_bytes());
        hex::encode(&digest[..12])
    }
}

#[derive(Debug, Clone)]
struct AutoEncoder {
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
    dec4: Conv2d,
    len: usize,
}

struct EncodeCache {
    s: Map,
    p1: Map,
    a1: Map,
    p2: Map,
    a2: Map,
}

struct DecodeCache {
    z: Map,
    p1: Map,
    p2: Map,
    p3: Map,
    a1: Map,
    a2: Map,
    a3: Map,
}

impl AutoEncoder {
    fn new(cfg: &ToyConfig) -> Self {
        let mut alloc = ParamAlloc::default();
        let pc = 3 * PATCH * PATCH;
        let (h, c) = (cfg.ae_hidden, cfg.latent_channels);
        let enc1 = Conv2d::new(&mut alloc, pc, h, 3, 1);
        let enc2 = Conv2d::new(&mut alloc, h, h, 3, 1);
        let enc3 = Conv2d::new(&mut alloc, h, c, 1, 1);
        let dec1 = Conv2d::new(&mut alloc, c, h, 3, 1);
        let dec2 = Conv2d::new(&mut alloc, h, h, 3, 1);
        let dec3 = Conv2d::new(&mut alloc, h, h, 3, 1);
        let dec4 = Conv2d::new(&mut alloc, h, pc, 1, 1);
        Self { enc1, enc2, enc3, dec1, dec2, dec3, dec4, len: alloc.len() }
    }

    fn init(&self, p: &mut [f64], rng: &mut Rng) {
        for conv in [&self.enc1, &self.enc2, &self.enc3, &self.dec1, &self.dec2, &self.dec3, &self.dec4] {
            conv.init(p, rng, 1.0);
        }
    }

    fn encode_raw(&self, p: &[f64], x: &Map) -> (Map, EncodeCache) {
        let s = space_to_depth(x, PATCH);
        let p1 = self.enc1.forward(p, &s);
        let a1 = silu_map(&p1);
        let p2 = self.enc2.forward(p, &a1);
        let a2 = silu_map(&p2);
        let z = self.enc3.forward(p, &a2);
        (z, EncodeCache { s, p1, a1, p2, a2 })
    }

    fn decode_raw(&self, p: &[f64], z: &Map) -> (Map, DecodeCache) {
        let p1 = self.dec1.forward(p, z);
        let a1 = silu_map(&p1);
        let p2 = self.dec2.forward(p, &a1);
        let a2 = silu_map(&p2);
        let p3 = self.dec3.forward(p, &a2);
        let a3 = silu_map(&p3);
        let out = depth_to_space(&self.dec4.forward(p, &a3), PATCH);
        (out, DecodeCache { z: z.clone(), p1, p2, p3, a1, a2, a3 })
    }

    /// Backward through the decoder; returns `∂L/∂z` when `need_input`.
    fn decode_backward(&self, p: &[f64], c: &DecodeCache, g_out: &Map, mut gp: Option<&mut [f64]>) -> Map {
        let g4 = space_to_depth(g_out, PATCH);
        let ga3 = self.dec4.backward(p, &c.a3, &g4, gp.as_deref_mut(), true).expect("input grad");
        let gp3 = silu_map_backward(&c.p3, &ga3);
        let ga2 = self.dec3.backward(p, &c.a2, &gp3, gp.as_deref_mut(), true).expect("input grad");
        let gp2 = silu_map_backward(&c.p2, &ga2);
        let ga1 = self.dec2.backward(p, &c.a1, &gp2, gp.as_deref_mut(), true).expect("input grad");
        let gp1 = silu_map_backward(&c.p1, &ga1);
        self.dec1.backward(p, &c.z, &gp1, gp, true).expect("input grad")
    }

    /// Reconstruction MSE of one image and its parameter gradient.
    fn loss_grad(&self, p: &[f64], x: &Map, gp: &mut [f64]) -> f64 {
        let (z, e) = self.encode_raw(p, x);
        let (out, cache) = self.decode_raw(p, &z);
        let (loss, g) = mse_with_grad(&out.data, &x.data);
        let g_out = Map::from_vec(out.c, out.h, out.w, g);
        let gz = self.decode_backward(p, &cache, &g_out, Some(gp));
        let ga2 = self.enc3.backward(p, &e.a2, &gz, Some(gp), true).expect("input grad");
        let gp2 = silu_map_backward(&e.p2, &ga2);
        let ga1 = self.enc2.backward(p, &e.a1, &gp2, Some(gp), true).expect("input grad");
        let gp1 = silu_map_backward(&e.p1, &ga1);
        self.enc1.backward(p, &e.s, &gp1, Some(gp), false);
        loss
    }
}

#[derive(Debug, Clone)]
struct DenoiserNet {
    time_lin: Linear,
    cond_lin: Linear,
    film1: Linear,
    film2: Linear,
    conv_in: Conv2d,
    conv_mid: Conv2d,
    conv_out: Conv2d,
    time_features: usize,
    time_width: usize,
    len: usize,
}

struct DenoiseCache {
    tfeat: Vec<f64>,
    tpre: Vec<f64>,
    cin: Vec<f64>,
    cpre: Vec<f64>,
    cact: Vec<f64>,
    film1: Vec<f64>,
    film2: Vec<f64>,
    h0: Map,
    m1: Map,
    a1: Map,
    h2: Map,
    m2: Map,
    a2: Map,
}

/// `h·(1 + scale_c) + shift_c` per channel; `film` holds scales then shifts.
fn modulate(h: &Map, film: &[f64]) -> Map {
    let mut out = h.clone();
    for c in 0..h.c {
        let (s, b) = (film[c], film[h.c + c]);
        for v in out.plane_mut(c) {
            *v = *v * (1.0 + s) + b;
        }
    }
    out
}

/// Pullback of [`modulate`]: returns `(∂L/∂h, ∂L/∂film)`.
fn modulate_backward(h: &Map, film: &[f64], g: &Map) -> (Map, Vec<f64>) {
    let mut gh = g.clone();
    let mut gf = vec![0.0; 2 * h.c];
    for c in 0..h.c {
        let s = film[c];
        let (hp, gpl) = (h.plane(c), g.plane(c));
        gf[c] = hp.iter().zip(gpl).map(|(a, b)| a * b).sum();
        gf[h.c + c] = gpl.iter().sum();
        for v in gh.plane_mut(c) {
            *v *= 1.0 + s;
        }
    }
    (gh, gf)
}

impl DenoiserNet {
    fn new(cfg: &ToyConfig) -> Self {
        let mut alloc = ParamAlloc::default();
        let (h, c, d) = (cfg.denoiser_hidden, cfg.latent_channels, cfg.embedding_dim());
        let time_width = 32;
        let time_lin = Linear::new(&mut alloc, cfg.time_features, time_width);
        let cond_lin = Linear::new(&mut alloc, time_width + d, cfg.cond_hidden);
        let film1 = Linear::new(&mut alloc, cfg.cond_hidden, 2 * h);
        let film2 = Linear::new(&mut alloc, cfg.cond_hidden, 2 * h);
        let conv_in = Conv2d::new(&mut alloc, c, h, 3, 1);
        let conv_mid = Conv2d::new(&mut alloc, h, h, 3, 1);
        let conv_out = Conv2d::new(&mut alloc, h, c, 3, 1);
        Self {
            time_lin,
            cond_lin,
            film1,
            film2,
            conv_in,
            conv_mid,
            conv_out,
            time_features: cfg.time_features,
            time_width,
            len: alloc.len(),
        }
    }

    fn init(&self, p: &mut [f64], rng: &mut Rng) {
        self.time_lin.init(p, rng, 1.0);
        self.cond_lin.init(p, rng, 1.0);
        self.film1.init(p, rng, 0.1);
        self.film2.init(p, rng, 0.1);
        self.conv_in.init(p, rng, 1.0);
        self.conv_mid.init(p, rng, 1.0);
        self.conv_out.init(p, rng, 0.5);
    }

    fn forward(&self, p: &[f64], z: &Map, t: usize, emb: &[f64]) -> (Map, DenoiseCache) {
        let tfeat = sinusoidal(t as f64, self.time_features);
        let tpre = self.time_lin.forward(p, &tfeat);
        let mut cin = silu(&tpre);
        cin.extend_from_slice(emb);
        let cpre = self.cond_lin.forward(p, &cin);
        let cact = silu(&cpre);
        let film1 = self.film1.forward(p, &cact);
        let film2 = self.film2.forward(p, &cact);
        let h0 = self.conv_in.forward(p, z);
        let m1 = modulate(&h0, &film1);
        let a1 = silu_map(&m1);
        let h2 = self.conv_mid.forward(p, &a1);
        let m2 = modulate(&h2, &film2);
        let a2 = silu_map(&m2);
        let out = self.conv_out.forward(p, &a2);
        (out, DenoiseCache { tfeat, tpre, cin, cpre, cact, film1, film2, h0, m1, a1, h2, m2, a2 })
    }

    fn backward(&self, p: &[f64], z: &Map, c: &DenoiseCache, g_out: &Map, mut gp: Option<&mut [f64]>, want_emb: bool) -> Option<Vec<f64>> {
        let ga2 = self.conv_out.backward(p, &c.a2, g_out, gp.as_deref_mut(), true).expect("input grad");
        let gm2 = silu_map_backward(&c.m2, &ga2);
        let (gh2, gf2) = modulate_backward(&c.h2, &c.film2, &gm2);
        let ga1 = self.conv_mid.backward(p, &c.a1, &gh2, gp.as_deref_mut(), true).expect("input grad");
        let gm1 = silu_map_backward(&c.m1, &ga1);
        let (gh0, gf1) = modulate_backward(&c.h0, &c.film1, &gm1);
        self.conv_in.backward(p, z, &gh0, gp.as_deref_mut(), false);

        let g1 = self.film1.backward(p, &c.cact, &gf1, gp.as_deref_mut(), true).expect("input grad");
        let g2 = self.film2.backward(p, &c.cact, &gf2, gp.as_deref_mut(), true).expect("input grad");
        let gcact: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let gcpre = silu_backward(&c.cpre, &gcact);
        let need_cin = want_emb || gp.is_some();
        let gcin = self.cond_lin.backward(p, &c.cin, &gcpre, gp.as_deref_mut(), need_cin)?;
        if let Some(gp) = gp {
            let gtpre = silu_backward(&c.tpre, &gcin[..self.time_width]);
            self.time_lin.backward(p, &c.tfeat, &gtpre, Some(gp), false);
        }
        want_emb.then(|| gcin[self.time_width..].to_vec())
    }
}

/// Convolutional autoencoder plus conditional denoiser on a linear schedule.
pub struct ToyBackend {
    config: ToyConfig,
    schedule: NoiseSchedule,
    ae: AutoEncoder,
    ae_params: Vec<f64>,
    latent_scale: f64,
    den: DenoiserNet,
    den_params: Vec<f64>,
    grad_evals: AtomicU64,
}

impl Clone for ToyBackend {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            ae: self.ae.clone(),
            ae_params: self.ae_params.clone(),
            latent_scale: self.latent_scale,
            den: self.den.clone(),
            den_params: self.den_params.clone(),
            grad_evals: AtomicU64::new(0),
        }
    }
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend")
            .field("config", &self.config)
            .field("autoencoder_params", &self.ae_params.len())
            .field("denoiser_params", &self.den_params.len())
            .field("latent_scale", &self.latent_scale)
            .finish()
    }
}

/// Losses measured at the end of [`ToyBackend::pretrain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub autoencoder_mse: f64,
    pub reconstruction_psnr_db: f64,
    pub denoiser_mse: f64,
}

impl ToyBackend {
    /// Seeded random weights, no training.
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let ae = AutoEncoder::new(&config);
        let den = DenoiserNet::new(&config);
        let rng = Rng::new(config.seed);
        let mut ae_params = vec![0.0; ae.len];
        ae.init(&mut ae_params, &mut rng.derive(1));
        let mut den_params = vec![0.0; den.len];
        den.init(&mut den_params, &mut rng.derive(2));
        Ok(Self { config, schedule, ae, ae_params, latent_scale: 1.0, den, den_params, grad_evals: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    fn image_map(&self, img: &ColorImage) -> Result<Map> {
        let s = self.config.image_size;
        if img.dims() != (s, s) {
            return Err(Error::SizeMismatch { a: img.dims(), b: (s, s) });
        }
        Ok(Map::from_vec(3, s, s, img.data().to_vec()))
    }

    fn latent_map(&self, z: &Latent) -> Result<Map> {
        let shape = self.config.latent_shape();
        z.ensure_shape(shape)?;
        Ok(Map::from_vec(shape.channels, shape.height, shape.width, z.data().to_vec()))
    }

    fn check_emb(&self, emb: &TextEmbedding) -> Result<()> {
        emb.ensure_dim(self.config.embedding_dim())
    }

    /// Runs the fixed pre-training routine: autoencoder first, then the
    /// denoiser on the frozen autoencoder's latents with caption embeddings.
    pub fn pretrain(config: ToyConfig, guidance: &dyn GuidanceBackend) -> Result<(Self, PretrainReport)> {
        let mut backend = Self::new(config)?;
        let cfg = backend.config.clone();
        if guidance.embedding_dim() != cfg.embedding_dim() {
            return Err(Error::DimensionMismatch { expected: cfg.embedding_dim(), actual: guidance.embedding_dim() });
        }
        let data = synthetic::colored_shapes(cfg.dataset_size, cfg.image_size, cfg.seed ^ 0x5eed);
        let images: Vec<Map> = data.iter().map(|s| backend.image_map(&s.image)).collect::<Result<_>>()?;
        let grays: Vec<Map> =
            data.iter().map(|s| backend.image_map(&replicate_gray(&rgb_to_gray(&s.image)))).collect::<Result<_>>()?;
        let mut rng = Rng::new(cfg.seed).derive(3);

        // autoencoder
        let ae = backend.ae.clone();
        let mut adam = Adam::new(ae.len, cfg.ae_lr, 0.9, 0.999, 1e-8);
        let mut grad = vec![0.0; ae.len];
        for step in 0..cfg.pretrain_steps {
            adam.lr = cosine_lr(cfg.ae_lr, step, cfg.pretrain_steps);
            grad.fill(0.0);
            for _ in 0..cfg.batch {
                let i = rng.int(0, images.len() - 1);
                let x = if rng.uniform() < cfg.gray_fraction { &grays[i] } else { &images[i] };
                ae.loss_grad(&backend.ae_params, x, &mut grad);
            }
            grad.iter_mut().for_each(|g| *g /= cfg.batch as f64);
            adam.step(&mut backend.ae_params, &grad);
        }

        let raw: Vec<Map> = images.iter().map(|x| ae.encode_raw(&backend.ae_params, x).0).collect();
        let n = (raw.len() * raw[0].data.len()) as f64;
        let mean = raw.iter().flat_map(|m| &m.data).sum::<f64>() / n;
        let var = raw.iter().flat_map(|m| &m.data).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        backend.latent_scale = 1.0 / var.sqrt().max(1e-6);

        let mut ae_mse = 0.0;
        let mut psnr = 0.0;
        for x in &images {
            let (z, _) = ae.encode_raw(&backend.ae_params, x);
            let (out, _) = ae.decode_raw(&backend.ae_params, &z);
            let mse = out.data.iter().zip(&x.data).map(|(a, b)| (a.clamp(0.0, 1.0) - b).powi(2)).sum::<f64>()
                / x.data.len() as f64;
            ae_mse += mse;
            psnr += 10.0 * (1.0 / mse.max(1e-10)).log10();
        }
        ae_mse /= images.len() as f64;
        psnr /= images.len() as f64;

        // denoiser warm-up
        let latents: Vec<Latent> = data.iter().map(|s| backend.encode(&s.image)).collect::<Result<_>>()?;
        let gray_latents: Vec<Latent> = data
            .iter()
            .map(|s| backend.encode(&replicate_gray(&rgb_to_gray(&s.image))))
            .collect::<Result<_>>()?;
        let captions: Vec<TextEmbedding> = data.iter().map(|s| guidance.encode_text(&s.caption)).collect();
        let empty = guidance.encode_text("");
        let gray_caption = guidance.encode_text("A grayscale photograph.");
        let shape = cfg.latent_shape();
        let den = backend.den.clone();
        let mut adam = Adam::new(den.len, cfg.denoiser_lr, 0.9, 0.999, 1e-8);
        let mut grad = vec![0.0; den.len];
        let mut den_mse = 0.0;
        let tail = (cfg.pretrain_steps / 10).max(1);
        for step in 0..cfg.pretrain_steps {
            adam.lr = cosine_lr(cfg.denoiser_lr, step, cfg.pretrain_steps);
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch {
                let i = rng.int(0, latents.len() - 1);
                let u = rng.uniform();
                let (z0, emb) = if u < cfg.cond_dropout {
                    (&latents[i], &empty)
                } else if u < cfg.cond_dropout + 0.1 {
                    (&gray_latents[i], &gray_caption)
                } else {
                    (&latents[i], &captions[i])
                };
                let t = rng.int(1, backend.schedule.timesteps());
                let eps = Latent::gaussian(shape, &mut rng);
                let zt = add_noise(z0, &eps, t, &backend.schedule)?;
                let zt_map = backend.latent_map(&zt)?;
                let (out, cache) = den.forward(&backend.den_params, &zt_map, t, emb.as_slice());
                let (loss, g) = mse_with_grad(&out.data, eps.data());
                batch_loss += loss;
                let g_out = Map::from_vec(out.c, out.h, out.w, g);
                den.backward(&backend.den_params, &zt_map, &cache, &g_out, Some(&mut grad), false);
            }
            grad.iter_mut().for_each(|g| *g /= cfg.batch as f64);
            adam.step(&mut backend.den_params, &grad);
            if step + tail >= cfg.pretrain_steps {
                den_mse += batch_loss / cfg.batch as f64;
            }
        }
        let report =
            PretrainReport { autoencoder_mse: ae_mse, reconstruction_psnr_db: psnr, denoiser_mse: den_mse / tail as f64 };
        Ok((backend, report))
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

impl Denoiser for ToyBackend {
    fn denoise(&self, z_t: &Latent, t: usize, emb: &TextEmbedding) -> Result<Latent> {
        self.schedule.check_timestep(t)?;
        self.check_emb(emb)?;
        let z = self.latent_map(z_t)?;
        let (out, _) = self.den.forward(&self.den_params, &z, t, emb.as_slice());
        Latent::unchecked(z_t.shape(), out.data)
    }
}

impl DiffusionBackend for ToyBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            image_width: self.config.image_size,
            image_height: self.config.image_size,
            latent_shape: self.config.latent_shape(),
            embedding_dim: self.config.embedding_dim(),
            reconstruction_floor_db: self.config.reconstruction_floor_db,
            inversion_tolerance: self.config.inversion_tolerance,
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode(&self, img: &ColorImage) -> Result<Latent> {
        let x = self.image_map(img)?;
        let (z, _) = self.ae.encode_raw(&self.ae_params, &x);
        Latent::new(self.config.latent_shape(), z.data.iter().map(|v| v * self.latent_scale).collect())
    }

    fn decode(&self, z: &Latent) -> Result<ColorImage> {
        let mut m = self.latent_map(z)?;
        m.data.iter_mut().for_each(|v| *v /= self.latent_scale);
        let (out, _) = self.ae.decode_raw(&self.ae_params, &m);
        let s = self.config.image_size;
        ColorImage::from_clamped(s, s, out.data)
    }

    fn decode_vjp(&self, z: &Latent, grad_image: &[f64]) -> Result<Latent> {
        let mut m = self.latent_map(z)?;
        let s = self.config.image_size;
        if grad_image.len() != 3 * s * s {
            return Err(Error::shape(3 * s * s, grad_image.len()));
        }
        self.grad_evals.fetch_add(1, Ordering::Relaxed);
        m.data.iter_mut().for_each(|v| *v /= self.latent_scale);
        let (out, cache) = self.ae.decode_raw(&self.ae_params, &m);
        // clamping to [0, 1] passes no gradient outside the range
        let g: Vec<f64> =
            out.data.iter().zip(grad_image).map(|(o, g)| if (0.0..=1.0).contains(o) { *g } else { 0.0 }).collect();
        let gz = self.ae.decode_backward(&self.ae_params, &cache, &Map::from_vec(3, s, s, g), None);
        Latent::new(z.shape(), gz.data.iter().map(|v| v / self.latent_scale).collect())
    }

    fn denoise_vjp(&self, z_t: &Latent, t: usize, emb: &TextEmbedding, grad_out: &Latent, wrt: Wrt) -> Result<DenoiseGrads> {
        self.schedule.check_timestep(t)?;
        self.check_emb(emb)?;
        grad_out.ensure_shape(z_t.shape())?;
        self.grad_evals.fetch_add(1, Ordering::Relaxed);
        let z = self.latent_map(z_t)?;
        let (out, cache) = self.den.forward(&self.den_params, &z, t, emb.as_slice());
        let g_out = Map::from_vec(out.c, out.h, out.w, grad_out.data().to_vec());
        let mut gp = wrt.params.then(|| vec![0.0; self.den.len]);
        let embedding = self.den.backward(&self.den_params, &z, &cache, &g_out, gp.as_deref_mut(), wrt.embedding);
        Ok(DenoiseGrads { params: gp, embedding })
    }

    fn denoiser_params(&self) -> &[f64] {
        &self.den_params
    }

    fn denoiser_params_mut(&mut self) -> &mut [f64] {
        &mut self.den_params
    }

    fn autoencoder_params(&self) -> &[f64] {
        &self.ae_params
    }

    fn gradient_evaluations(&self) -> u64 {
        self.grad_evals.load(Ordering::Relaxed)
    }
}

impl Checkpoint for ToyBackend {
    fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                backend: "toy".into(),
                config: serde_json::to_value(&self.config).expect("config serializes"),
                schedule: self.config.schedule,
                tensors: vec![
                    TensorEntry::new("autoencoder", vec![self.ae_params.len()]),
                    TensorEntry::new("denoiser", vec![self.den_params.len()]),
                    TensorEntry::new("latent_scale", vec![1]),
                ],
            },
            tensors: vec![self.ae_params.clone(), self.den_params.clone(), vec![self.latent_scale]],
        }
    }

    fn from_checkpoint(file: CheckpointFile) -> Result<Self> {
        if file.header.backend != "toy" {
            return Err(Error::BadCheckpoint(format!("expected a toy checkpoint, found {:?}", file.header.backend)));
        }
        let config: ToyConfig = serde_json::from_value(file.header.config.clone())?;
        let mut backend = Self::new(config)?;
        let ae = file.tensor("autoencoder")?;
        let den = file.tensor("denoiser")?;
        if ae.len() != backend.ae_params.len() || den.len() != backend.den_params.len() {
            return Err(Error::BadCheckpoint("parameter counts do not match the configured networks".into()));
        }
        backend.ae_params.copy_from_slice(ae);
        backend.den_params.copy_from_slice(den);
        backend.latent_scale = file.tensor("latent_scale")?[0];
        Ok(backend)
    }
}

/// A pre-trained toy diffusion backend with the guidance encoders it was
/// trained against.
#[derive(Debug, Clone)]
pub struct ToyModels {
    pub backend: ToyBackend,
    pub guidance: ToyGuidance,
    pub report: Option<PretrainReport>,
}

/// Directory for the pre-training cache: `$DIFFCOLOR_CACHE_DIR`, or
/// `diffcolor-cache` under the system temp dir.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("DIFFCOLOR_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("diffcolor-cache"))
}

fn memo() -> &'static Mutex<HashMap<String, ToyModels>> {
    static MEMO: OnceLock<Mutex<HashMap<String, ToyModels>>> = OnceLock::new();
    MEMO.get_or_init(Default::default)
}

/// Pre-trained toy models for `config`, computed once per process and cached
/// on disk across processes. Pre-training is deterministic, so a cache hit and
/// a fresh run give bit-identical weights.
pub fn pretrained(config: &ToyConfig) -> Result<ToyModels> {
    let key = config.cache_key();
    let mut memo = memo().lock().unwrap_or_else(|e| e.into_inner());
    if let Some(m) = memo.get(&key) {
        return Ok(m.clone());
    }
    let guidance = ToyGuidance::new(config.guidance)?;
    let dir = cache_dir();
    let path = dir.join(format!("toy-{key}.ckpt"));
    let report_path = dir.join(format!("toy-{key}.json"));
    let cached = restore_cached(&path, config);
    let models = match cached {
        Some(backend) => {
            let report = std::fs::read(&report_path).ok().and_then(|b| serde_json::from_slice(&b).ok());
            ToyModels { backend, guidance, report }
        }
        None => {
            let (backend, report) = ToyBackend::pretrain(config.clone(), &guidance)?;
            // a failed cache write only costs a re-train next time
            if std::fs::create_dir_all(&dir).is_ok() {
                let tmp = dir.join(format!("toy-{key}.{}.tmp", std::process::id()));
                if backend.to_checkpoint().save(&tmp).is_ok() {
                    let _ = std::fs::rename(&tmp, &path);
                }
                let _ = std::fs::write(&report_path, serde_json::to_vec(&report)?);
            }
            ToyModels { backend, guidance, report: Some(report) }
        }
    };
    memo.insert(key, models.clone());
    Ok(models)
}

fn restore_cached(path: &std::path::Path, config: &ToyConfig) -> Option<ToyBackend> {
    let file = CheckpointFile::load(path).ok()?;
    let backend = ToyBackend::from_checkpoint(file).ok()?;
    (backend.config == *config).then_some(backend)
}
