//! Builds a second-stage edit session and renders recolorings along the
//! interpolation weight.
//!
//!     cargo run -p diffcolor --example edit_session [out_dir]

use std::collections::BTreeMap;

use diffcolor::align::AlignConfig;
use diffcolor::diffusion::toy::{self, ToyBackend, ToyConfig};
use diffcolor::stage2::{EditSession, Phase, PromptOptions, PromptSet, Stage2Config};
use diffcolor::{rgb_to_gray, synthetic};

fn main() -> diffcolor::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "diffcolor-out/edit".into()));
    let models = toy::pretrained(&ToyConfig::default())?;
    let sample = synthetic::colored_shapes(1, 32, 17).remove(0);
    let object = sample.scene.shapes[0].shape.name().to_string();
    let prompts = PromptSet::from_objects(&sample.scene.plain_caption(), std::slice::from_ref(&object), PromptOptions::default())?;
    println!("context:   {}\nrewritten: {}", prompts.context, prompts.rewritten);

    let session = EditSession::build(
        "example",
        &sample.image,
        &rgb_to_gray(&sample.image),
        prompts,
        &models.backend,
        &models.guidance,
        &Stage2Config::toy(),
        &AlignConfig::default(),
        |e| {
            if e.step % 100 == 0 {
                let phase = if e.phase == Phase::Embedding { "embed" } else { "tune" };
                println!("  {phase:>5} step {:>3} loss {:.4}", e.step, e.loss);
            }
        },
    )?;
    session.save(&out)?;
    let reloaded = EditSession::<ToyBackend>::load(&out)?;

    let colors = BTreeMap::from([(object, "purple".to_string())]);
    for eta in [0.0, 0.5, 0.7, 0.85, 1.0] {
        let edit = reloaded.edit(&models.guidance, &colors, eta, 0)?;
        println!("eta {eta:.2}: {}", edit.target_prompt);
        edit.image.save(out.join(format!("edit_eta{eta:.3}.png")))?;
    }
    for v in reloaded.generate_variants(&models.guidance, &colors, 4, None, None)? {
        v.image.save(out.join(format!("variant_eta{:.3}_seed{}.png", v.eta, v.seed)))?;
    }
    println!("session saved to {}", out.display());
    Ok(())
}
