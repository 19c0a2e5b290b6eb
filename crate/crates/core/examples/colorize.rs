//! First-stage colorization of a synthetic gray image, with and without the
//! contrastive term.
//!
//!     cargo run -p diffcolor --example colorize [out_dir]

use diffcolor::align::{align, AlignConfig};
use diffcolor::diffusion::toy::{self, ToyConfig};
use diffcolor::guidance::{image_text_alignment, NegativePromptSet};
use diffcolor::stage1::{colorize_stage1, moving_average, Stage1Config};
use diffcolor::{replicate_gray, rgb_to_gray, synthetic};

fn main() -> diffcolor::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "diffcolor-out/colorize".into()));
    std::fs::create_dir_all(&out).map_err(|e| diffcolor::Error::io(&out, e))?;
    let models = toy::pretrained(&ToyConfig::default())?;
    let sample = synthetic::colored_shapes(1, 32, 9).remove(0);
    let gray = rgb_to_gray(&sample.image);
    let context = &sample.caption;
    println!("context: {context}");

    let baseline = image_text_alignment(&replicate_gray(&gray), context, &models.guidance)?;
    for (name, lambda) in [("guided", 0.5), ("unguided", 0.0)] {
        let cfg = Stage1Config { lambda, ..Stage1Config::toy() };
        let mut negatives = NegativePromptSet::default();
        let run = colorize_stage1(&gray, context, &mut negatives, &cfg, &models.backend, &models.guidance, |e| {
            if e.step % 100 == 0 {
                println!("  [{name}] step {:>3}  t {:>4}  ldm {:.4}  cst {:.4}", e.step, e.t, e.ldm, e.cst);
            }
        })?;
        let aligned = align(&gray, &run.primary, &AlignConfig::default())?;
        let curve = moving_average(&run.log, 100);
        let score = image_text_alignment(&aligned, context, &models.guidance)?;
        println!(
            "{name}: moving average {:.4} -> {:.4}, alignment {baseline:.3} -> {score:.3}",
            curve.first().copied().unwrap_or(f64::NAN),
            curve.last().copied().unwrap_or(f64::NAN)
        );
        aligned.save(out.join(format!("{name}.png")))?;
    }
    sample.image.save(out.join("ground_truth.png"))?;
    replicate_gray(&gray).save(out.join("gray.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
