//! Procedural colored-shapes images with matching captions.
//!
//! Used to pre-train the toy backend and as the fixture set for end-to-end
//! tests: every image has one or two soft-edged shapes on a shaded
//! background, and its caption names every color that appears.

use crate::image::ColorImage;
use crate::rng::Rng;

/// Named colors used by the generator and understood by the toy text encoder.
pub const PALETTE: [(&str, [f64; 3]); 12] = [
    ("red", [0.85, 0.12, 0.10]),
    ("orange", [0.95, 0.55, 0.10]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("green", [0.15, 0.65, 0.20]),
    ("cyan", [0.15, 0.75, 0.80]),
    ("blue", [0.12, 0.25, 0.85]),
    ("purple", [0.50, 0.20, 0.70]),
    ("pink", [0.95, 0.50, 0.70]),
    ("brown", [0.50, 0.30, 0.15]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
    ("gray", [0.50, 0.50, 0.50]),
];

/// Width in pixels of the linear ramp at shape borders.
const EDGE_WIDTH: f64 = 2.5;

/// RGB of a palette color by name.
pub fn palette_color(name: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Signed distance (pixels, negative inside) from `(x, y)` to a shape of
    /// radius `r` centered at `(cx, cy)`.
    fn distance(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> f64 {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => (dx * dx + dy * dy).sqrt() - r,
            Shape::Square => dx.abs().max(dy.abs()) - r * 0.85,
            Shape::Triangle => {
                // upward equilateral triangle: max over the three edge normals
                let n = [(0.0, 1.0), (0.866_025, -0.5), (-0.866_025, -0.5)];
                n.iter().map(|(nx, ny)| dx * nx + dy * ny).fold(f64::NEG_INFINITY, f64::max) - r * 0.6
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub color: &'static str,
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: &'static str,
    pub shapes: Vec<ShapeSpec>,
}

impl Scene {
    pub fn caption(&self) -> String {
        let parts: Vec<String> =
            self.shapes.iter().map(|s| format!("{} {} {}", article(s.color), s.color, s.shape.name())).collect();
        let mut text = parts.join(" and ");
        if let Some(first) = text.get(..1) {
            text = first.to_uppercase() + &text[1..];
        }
        format!("{text} on {} {} background.", article(self.background), self.background)
    }

    /// Caption with every color word removed, e.g. "A circle on a background."
    pub fn plain_caption(&self) -> String {
        let parts: Vec<String> = self.shapes.iter().map(|s| format!("a {}", s.shape.name())).collect();
        let text = parts.join(" and ");
        format!("A{} on a background.", &text[1..])
    }

    pub fn render(&self, size: usize) -> ColorImage {
        let bg = palette_color(self.background).expect("palette color");
        ColorImage::from_fn(size, size, |x, y| {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            // gentle vertical shading keeps some luminance structure in the background
            let shade = 1.0 + 0.12 * (0.5 - fy / size as f64);
            let mut px = bg.map(|c| (c * shade).clamp(0.0, 1.0));
            for s in &self.shapes {
                let col = palette_color(s.color).expect("palette color");
                let d = s.shape.distance(fx, fy, s.center.0, s.center.1, s.radius);
                let cover = (0.5 - d / EDGE_WIDTH).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let lit = 1.0 + 0.1 * ((s.center.1 - fy) / s.radius).clamp(-1.0, 1.0);
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - cover) + (col[c] * lit).clamp(0.0, 1.0) * cover;
                    }
                }
            }
            px
        })
        .expect("generator produces valid pixels")
    }
}

/// Random scene on a `size × size` canvas. Shape colors are drawn from the
/// chromatic part of the palette and always differ from the background.
pub fn random_scene(rng: &mut Rng, size: usize) -> Scene {
    let chromatic = &PALETTE[..9];
    let background = PALETTE[rng.int(0, PALETTE.len() - 1)].0;
    let count = if rng.uniform() < 0.5 { 1 } else { 2 };
    let s = size as f64;
    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        let color = loop {
            let c = chromatic[rng.int(0, chromatic.len() - 1)].0;
            if c != background && shapes.iter().all(|o: &ShapeSpec| o.color != c) {
                break c;
            }
        };
        let radius = if count == 1 { rng.range(0.22, 0.34) * s } else { rng.range(0.15, 0.22) * s };
        // two shapes go to opposite halves so they rarely overlap
        let (xlo, xhi) = match (count, i) {
            (1, _) => (0.35, 0.65),
            (_, 0) => (0.22, 0.35),
            _ => (0.65, 0.78),
        };
        shapes.push(ShapeSpec {
            shape: Shape::ALL[rng.int(0, 2)],
            color,
            center: (rng.range(xlo, xhi) * s, rng.range(0.35, 0.65) * s),
            radius,
        });
    }
    Scene { background, shapes }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub image: ColorImage,
    pub caption: String,
}

/// `n` seeded samples at `size × size`.
pub fn colored_shapes(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let scene = random_scene(&mut rng, size);
            let image = scene.render(size);
            let caption = scene.caption();
            Sample { scene, image, caption }
        })
        .collect()
}
