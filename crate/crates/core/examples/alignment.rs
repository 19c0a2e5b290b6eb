//! Chroma and correspondence alignment of a colorization that is slightly
//! off from its gray input.
//!
//!     cargo run -p diffcolor --example alignment

use diffcolor::align::{align_chroma, align_correspondence, correspondence, PatchMatchConfig};
use diffcolor::metrics::psnr;
use diffcolor::{replicate_gray, rgb_to_gray, synthetic, ColorImage};

fn main() -> diffcolor::Result<()> {
    let shapes = synthetic::colored_shapes(1, 48, 21).remove(0).image;
    // flat regions carry no offset information, so add some texture
    let truth = ColorImage::from_fn(48, 48, |x, y| {
        let t = 0.85 + 0.15 * (x as f64 * 0.7).sin() * (y as f64 * 0.5).cos();
        shapes.get(x, y).map(|v| v * t)
    })?;
    let gray = rgb_to_gray(&truth);
    let (w, h) = truth.dims();
    // a colorization whose content sits 3 px to the right
    let shifted = ColorImage::from_fn(w, h, |x, y| truth.get(x.saturating_sub(3), y))?;

    let field = correspondence(&gray, &rgb_to_gray(&shifted), &PatchMatchConfig::default())?;
    let (dx, dy) = field.mean_offset();
    println!("mean offset found by patch-match: ({dx:.2}, {dy:.2})");

    let luma = |img: &ColorImage| psnr(&replicate_gray(&rgb_to_gray(img)), &replicate_gray(&gray), 1.0);
    for (name, img) in [
        ("unaligned", shifted.clone()),
        ("chroma", align_chroma(&gray, &shifted)?),
        ("correspondence", align_correspondence(&gray, &shifted, &PatchMatchConfig::default())?),
    ] {
        println!("{name:>15}: luma PSNR {:.2} dB, PSNR to truth {:.2} dB", luma(&img)?, psnr(&img, &truth, 1.0)?);
    }
    Ok(())
}
