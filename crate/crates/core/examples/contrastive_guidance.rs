//! The contrastive color loss for a colored image and its gray version,
//! with dot-product and cosine logits.
//!
//!     cargo run -p diffcolor --example contrastive_guidance

use diffcolor::guidance::{
    contrastive_loss_with_grad, GuidanceBackend, LogitMode, NegativePromptSet, ToyGuidance, ToyGuidanceConfig,
};
use diffcolor::{replicate_gray, rgb_to_gray, synthetic, TextEmbedding};

fn main() -> diffcolor::Result<()> {
    let g = ToyGuidance::new(ToyGuidanceConfig::default())?;
    let mut negatives = NegativePromptSet::default();
    let negs: Vec<TextEmbedding> = negatives.embeddings(&g).to_vec();
    let neg_slices: Vec<&[f64]> = negs.iter().map(TextEmbedding::as_slice).collect();
    println!("negatives: {:?}", negatives.prompts());

    let sample = synthetic::colored_shapes(1, 32, 9).remove(0);
    let positive = g.encode_text(&sample.caption);
    let gray = replicate_gray(&rgb_to_gray(&sample.image));
    for mode in [LogitMode::Dot, LogitMode::Cosine { temperature: 0.1 }] {
        for (name, img) in [("color", &sample.image), ("gray", &gray)] {
            let e = g.encode_image(img)?;
            let (loss, grad) = contrastive_loss_with_grad(e.as_slice(), positive.as_slice(), &neg_slices, mode)?;
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("{mode:?} {name:>5}: loss {loss:.4}, |grad| {norm:.4}");
        }
    }
    Ok(())
}
