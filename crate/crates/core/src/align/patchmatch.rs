//! Multi-scale patch-match dense correspondence on luma.
//!
//! For every target pixel the field stores an integer offset into the source
//! image. Matching cost is the mean squared difference over a square patch
//! (edge-clamped) plus a small penalty on offset length, so flat regions
//! prefer staying put instead of drifting to any equally flat patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchMatchConfig {
    /// Patch side length (odd).
    pub patch: usize,
    pub scales: usize,
    pub iterations: usize,
    /// Cost added per pixel of offset length.
    pub displacement_penalty: f64,
    pub seed: u64,
}

impl Default for PatchMatchConfig {
    fn default() -> Self {
        Self { patch: 7, scales: 3, iterations: 4, displacement_penalty: 1e-4, seed: 0 }
    }
}

/// Integer offset per target pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub offsets: Vec<(i32, i32)>,
}

impl Field {
    pub fn get(&self, x: usize, y: usize) -> (i32, i32) {
        self.offsets[y * self.width + x]
    }

    /// Mean offset `(dx, dy)` over all pixels.
    pub fn mean_offset(&self) -> (f64, f64) {
        let n = self.offsets.len() as f64;
        let (sx, sy) = self.offsets.iter().fold((0.0, 0.0), |(a, b), &(dx, dy)| (a + dx as f64, b + dy as f64));
        (sx / n, sy / n)
    }

    /// Mean Euclidean offset length.
    pub fn mean_displacement(&self) -> f64 {
        let n = self.offsets.len() as f64;
        self.offsets.iter().map(|&(dx, dy)| f64::from(dx * dx + dy * dy).sqrt()).sum::<f64>() / n
    }
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x as isize, 2 * y as isize);
                v.push(0.25 * (self.at(sx, sy) + self.at(sx + 1, sy) + self.at(sx, sy + 1) + self.at(sx + 1, sy + 1)));
            }
        }
        Plane { w, h, v }
    }
}

struct Matcher<'a> {
    target: &'a Plane,
    source: &'a Plane,
    radius: isize,
    penalty: f64,
}

impl Matcher<'_> {
    fn cost(&self, x: usize, y: usize, d: (i32, i32)) -> f64 {
        let (x, y) = (x as isize, y as isize);
        let (sx, sy) = (x + d.0 as isize, y + d.1 as isize);
        let r = self.radius;
        let mut ssd = 0.0;
        for oy in -r..=r {
            for ox in -r..=r {
                let diff = self.target.at(x + ox, y + oy) - self.source.at(sx + ox, sy + oy);
                ssd += diff * diff;
            }
        }
        let area = ((2 * r + 1) * (2 * r + 1)) as f64;
        ssd / area + self.penalty * f64::from(d.0 * d.0 + d.1 * d.1).sqrt()
    }

    /// Source centers may overhang the border by the patch radius, so pixels
    /// whose true match was cropped away still find an edge-clamped one.
    fn valid(&self, x: usize, y: usize, d: (i32, i32)) -> bool {
        let m = self.radius as i64;
        let sx = x as i64 + i64::from(d.0);
        let sy = y as i64 + i64::from(d.1);
        sx >= -m && sy >= -m && sx < self.source.w as i64 + m && sy < self.source.h as i64 + m
    }

    fn run(&self, offsets: &mut [(i32, i32)], iterations: usize, rng: &mut Rng) {
        let (w, h) = (self.target.w, self.target.h);
        let mut costs: Vec<f64> = (0..w * h).map(|i| self.cost(i % w, i / w, offsets[i])).collect();
        let max_radius = w.max(h) as i32;
        for iter in 0..iterations {
            let forward = iter % 2 == 0;
            let step: isize = if forward { -1 } else { 1 };
            for k in 0..w * h {
                let i = if forward { k } else { w * h - 1 - k };
                let (x, y) = (i % w, i / w);
                let try_offset = |d: (i32, i32), offsets: &mut [(i32, i32)], costs: &mut [f64]| {
                    if self.valid(x, y, d) {
                        let c = self.cost(x, y, d);
                        if c < costs[i] {
                            costs[i] = c;
                            offsets[i] = d;
                        }
                    }
                };
                // propagation from the already-visited horizontal and vertical neighbors
                let nx = x as isize + step;
                if nx >= 0 && (nx as usize) < w {
                    let d = offsets[y * w + nx as usize];
                    try_offset(d, offsets, &mut costs);
                }
                let ny = y as isize + step;
                if ny >= 0 && (ny as usize) < h {
                    let d = offsets[ny as usize * w + x];
                    try_offset(d, offsets, &mut costs);
                }
                // random search in shrinking windows around the current best
                let mut radius = max_radius;
                while radius >= 1 {
                    let (bx, by) = offsets[i];
                    let rx = bx + rng.int(0, 2 * radius as usize) as i32 - radius;
                    let ry = by + rng.int(0, 2 * radius as usize) as i32 - radius;
                    try_offset((rx, ry), offsets, &mut costs);
                    radius /= 2;
                }
            }
        }
    }
}

/// Offsets mapping each `target` pixel to its best-matching `source` pixel.
/// Offsets may point slightly past the border; [`warp`] clamps them.
pub fn correspondence(target: &GrayImage, source: &GrayImage, cfg: &PatchMatchConfig) -> Result<Field> {
    if target.dims() != source.dims() {
        return Err(Error::SizeMismatch { a: target.dims(), b: source.dims() });
    }
    if cfg.patch == 0 || cfg.patch % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {}", cfg.patch)));
    }
    let (w, h) = target.dims();
    let mut pyramid = vec![(
        Plane { w, h, v: target.data().to_vec() },
        Plane { w, h, v: source.data().to_vec() },
    )];
    while pyramid.len() < cfg.scales.max(1) {
        let (t, s) = pyramid.last().expect("non-empty");
        if t.w.min(t.h) / 2 < cfg.patch {
            break;
        }
        let next = (t.half(), s.half());
        pyramid.push(next);
    }

    let mut rng = Rng::new(cfg.seed);
    let mut offsets: Vec<(i32, i32)> = Vec::new();
    let mut prev_w = 0;
    for (level, (t, s)) in pyramid.iter().enumerate().rev() {
        let matcher = Matcher { target: t, source: s, radius: (cfg.patch / 2) as isize, penalty: cfg.displacement_penalty };
        offsets = if level + 1 == pyramid.len() {
            // coarsest level: identity start, random search finds the rest
            vec![(0, 0); t.w * t.h]
        } else {
            let coarse = std::mem::take(&mut offsets);
            (0..t.w * t.h)
                .map(|i| {
                    let (x, y) = (i % t.w, i / t.w);
                    let (dx, dy) = coarse[(y / 2) * prev_w + x / 2];
                    let d = (2 * dx, 2 * dy);
                    if matcher.valid(x, y, d) {
                        d
                    } else {
                        (0, 0)
                    }
                })
                .collect()
        };
        matcher.run(&mut offsets, cfg.iterations, &mut rng);
        prev_w = t.w;
    }
    Ok(Field { width: w, height: h, offsets })
}

/// Samples `img` at each pixel's offset.
pub fn warp(img: &ColorImage, field: &Field) -> Result<ColorImage> {
    if img.dims() != (field.width, field.height) {
        return Err(Error::SizeMismatch { a: img.dims(), b: (field.width, field.height) });
    }
    let (w, h) = img.dims();
    ColorImage::from_fn(w, h, |x, y| {
        let (dx, dy) = field.get(x, y);
        let sx = (x as i64 + i64::from(dx)).clamp(0, w as i64 - 1) as usize;
        let sy = (y as i64 + i64::from(dy)).clamp(0, h as i64 - 1) as usize;
        img.get(sx, sy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = Rng::new(seed);
        let noise: Vec<f64> = (0..w * h).map(|_| rng.uniform()).collect();
        GrayImage::from_fn(w, h, |x, y| {
            let smooth = 0.5 + 0.3 * ((x as f64) * 0.4).sin() * ((y as f64) * 0.3).cos();
            (0.6 * smooth + 0.4 * noise[y * w + x]).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn aligned_images_give_identity_field() {
        let g = textured(32, 32, 1);
        let f = correspondence(&g, &g, &PatchMatchConfig::default()).unwrap();
        assert!(f.mean_displacement() < 0.5, "{}", f.mean_displacement());
    }

    #[test]
    fn recovers_horizontal_shift() {
        let g = textured(40, 40, 2);
        // source content moved 3 px to the right
        let shifted = GrayImage::from_fn(40, 40, |x, y| g.get(x.saturating_sub(3), y)).unwrap();
        let f = correspondence(&g, &shifted, &PatchMatchConfig::default()).unwrap();
        let (dx, dy) = f.mean_offset();
        assert!((dx - 3.0).abs() < 1.0 && dy.abs() < 1.0, "({dx}, {dy})");
    }

    #[test]
    fn rejects_even_patch() {
        let g = textured(16, 16, 3);
        let cfg = PatchMatchConfig { patch: 6, ..Default::default() };
        assert!(correspondence(&g, &g, &cfg).is_err());
    }
}
