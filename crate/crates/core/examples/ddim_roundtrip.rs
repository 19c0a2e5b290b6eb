//! DDIM inversion and sampling with the toy backend at several step counts.
//!
//!     cargo run -p diffcolor --example ddim_roundtrip

use diffcolor::diffusion::toy::{self, ToyConfig};
use diffcolor::diffusion::{ddim_invert, ddim_sample, DiffusionBackend};
use diffcolor::guidance::GuidanceBackend;
use diffcolor::metrics::psnr;
use diffcolor::synthetic;

fn main() -> diffcolor::Result<()> {
    let models = toy::pretrained(&ToyConfig::default())?;
    let b = &models.backend;
    let sample = synthetic::colored_shapes(1, 32, 40).remove(0);
    let emb = models.guidance.encode_text(&sample.caption);
    let z0 = b.encode(&sample.image)?;
    println!("{}  (tolerance {:.2})", sample.caption, b.info().inversion_tolerance);
    for steps in [5, 10, 20, 50, 100] {
        let zt = ddim_invert(b, &z0, &emb, steps, b.schedule())?;
        let back = ddim_sample(b, &zt, &emb, steps, b.schedule(), 0.0)?;
        let img = b.decode(&back)?;
        println!(
            "{steps:>4} steps: latent max error {:.4}, image PSNR {:.2} dB",
            back.max_abs_diff(&z0),
            psnr(&img, &sample.image, 1.0)?
        );
    }
    Ok(())
}
