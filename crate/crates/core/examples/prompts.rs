//! Identifier rewriting and target prompts.
//!
//!     cargo run -p diffcolor --example prompts

use diffcolor::stage2::prompt::{parse_color_assignments, with_suffix, IdentifierStyle};
use diffcolor::stage2::{PromptOptions, PromptSet};

fn main() -> diffcolor::Result<()> {
    let context = "A dog sitting on a wooden bench.";
    let objects = vec!["dog".to_string(), "wooden bench".to_string()];
    let colors = parse_color_assignments("dog=brown, wooden bench=purple")?;

    for options in [
        PromptOptions::default(),
        PromptOptions { identifier_style: IdentifierStyle::PerObject, target_keeps_identifiers: true },
    ] {
        let set = PromptSet::from_objects(context, &objects, options)?;
        println!("{options:?}");
        println!("  rewritten: {}", set.rewritten);
        println!("  target:    {}", set.target(&colors)?);
    }
    let set = PromptSet::from_objects(context, &objects, PromptOptions::default())?;
    println!("with suffix: {}", with_suffix(&set.target(&colors)?, "in the snow"));
    Ok(())
}
