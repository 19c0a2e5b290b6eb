//! Writes two small image folders and scores one against the other.
//!
//!     cargo run -p diffcolor --example metrics_report [out_dir]

use diffcolor::guidance::{ToyGuidance, ToyGuidanceConfig};
use diffcolor::metrics::{run_report, ReportConfig, ToyFeatures};
use diffcolor::synthetic;

fn main() -> diffcolor::Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "diffcolor-out/report".into()));
    let (refs, outs) = (root.join("references"), root.join("outputs"));
    for d in [&refs, &outs] {
        std::fs::create_dir_all(d).map_err(|e| diffcolor::Error::io(d, e))?;
    }
    let mut prompts = serde_json::Map::new();
    for (i, s) in synthetic::colored_shapes(6, 32, 5).into_iter().enumerate() {
        let name = format!("{i:03}.png");
        s.image.save(refs.join(&name))?;
        // a washed-out "output": halfway to gray
        let washed = diffcolor::ColorImage::from_fn(32, 32, |x, y| {
            let p = s.image.get(x, y);
            let m = (p[0] + p[1] + p[2]) / 3.0;
            p.map(|v| 0.5 * (v + m))
        })?;
        washed.save(outs.join(&name))?;
        prompts.insert(name, s.caption.into());
    }
    let prompt_file = root.join("prompts.json");
    std::fs::write(&prompt_file, serde_json::to_vec_pretty(&prompts)?).map_err(|e| diffcolor::Error::io(&prompt_file, e))?;

    let guidance = ToyGuidance::new(ToyGuidanceConfig::default())?;
    let features = ToyFeatures::new(guidance.clone());
    let report = run_report(&outs, &refs, Some(&prompt_file), &ReportConfig::default(), &features, &guidance)?;
    print!("{}", report.to_markdown("washed out"));
    let (csv, md) = report.write(&root, "washed out")?;
    println!("\nwrote {} and {}", csv.display(), md.display());
    Ok(())
}
