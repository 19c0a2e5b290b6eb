//! Pre-trains the toy diffusion backend (or loads it from the cache) and
//! reports autoencoder fidelity and DDIM round-trip error.
//!
//!     cargo run -p diffcolor --example pretrain_toy

use std::time::Instant;

use diffcolor::diffusion::toy::{self, ToyConfig};
use diffcolor::diffusion::{ddim_invert, ddim_sample, DiffusionBackend};
use diffcolor::guidance::GuidanceBackend;
use diffcolor::synthetic;

fn main() -> diffcolor::Result<()> {
    let cfg = ToyConfig::default();
    let start = Instant::now();
    let models = toy::pretrained(&cfg)?;
    println!("ready in {:.1}s (cache: {})", start.elapsed().as_secs_f64(), toy::cache_dir().display());
    if let Some(r) = models.report {
        println!(
            "autoencoder mse {:.5}, mean reconstruction PSNR {:.2} dB, denoiser mse {:.4}",
            r.autoencoder_mse, r.reconstruction_psnr_db, r.denoiser_mse
        );
    }

    let backend = &models.backend;
    let held_out = synthetic::colored_shapes(16, cfg.image_size, 99);
    let mut worst = 0.0f64;
    let mut psnr_min = f64::INFINITY;
    for s in &held_out {
        let z0 = backend.encode(&s.image)?;
        let rec = backend.decode(&z0)?;
        let mse = rec.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / rec.data().len() as f64;
        psnr_min = psnr_min.min(10.0 * (1.0 / mse).log10());
        let emb = models.guidance.encode_text(&s.caption);
        let zt = ddim_invert(backend, &z0, &emb, 20, backend.schedule())?;
        let back = ddim_sample(backend, &zt, &emb, 20, backend.schedule(), 0.0)?;
        worst = worst.max(back.max_abs_diff(&z0));
    }
    println!("held-out worst reconstruction PSNR {psnr_min:.2} dB");
    println!("held-out worst 20-step DDIM round-trip error {worst:.4}");
    Ok(())
}
