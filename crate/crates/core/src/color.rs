//! sRGB / CIE L*a*b* conversion (D65 white, sRGB companding).

use std::sync::LazyLock;

use crate::image::ColorImage;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

// Exact inverse of the forward matrix so the round trip only loses float
// precision.
static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| {
    let m = nalgebra::Matrix3::from_fn(|r, c| RGB_TO_XYZ[r][c]);
    let inv = m.try_inverse().expect("sRGB matrix is invertible");
    std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]))
});

/// Reference white, taken as the XYZ of sRGB (1, 1, 1).
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

#[inline]
pub fn srgb_to_linear(v: f64) -> f64 {
    let a = v.abs();
    let l = if a <= 0.04045 { a / 12.92 } else { ((a + 0.055) / 1.055).powf(2.4) };
    l.copysign(v)
}

#[inline]
pub fn linear_to_srgb(l: f64) -> f64 {
    let a = l.abs();
    let v = if a <= 0.0031308 { 12.92 * a } else { 1.055 * a.powf(1.0 / 2.4) - 0.055 };
    v.copysign(l)
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_inv(f: f64) -> f64 {
    if f > DELTA {
        f * f * f
    } else {
        3.0 * DELTA * DELTA * (f - 4.0 / 29.0)
    }
}

/// Converts one sRGB pixel to `[L, a, b]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|r| {
        RGB_TO_XYZ[r][0] * lin[0] + RGB_TO_XYZ[r][1] * lin[1] + RGB_TO_XYZ[r][2] * lin[2]
    });
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts `[L, a, b]` to sRGB without clamping; out-of-gamut colors give
/// samples outside `[0, 1]`.
pub fn lab_to_srgb_unclamped(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [lab_f_inv(fx) * WHITE[0], lab_f_inv(fy) * WHITE[1], lab_f_inv(fz) * WHITE[2]];
    let m = &*XYZ_TO_RGB;
    std::array::from_fn(|r| linear_to_srgb(m[r][0] * xyz[0] + m[r][1] * xyz[1] + m[r][2] * xyz[2]))
}

pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    lab_to_srgb_unclamped(lab).map(|v| v.clamp(0.0, 1.0))
}

/// L* of the neutral gray whose sRGB value is `v`.
pub fn neutral_lightness(v: f64) -> f64 {
    116.0 * lab_f(srgb_to_linear(v)) - 16.0
}

/// Planar L*a*b* image (`L` plane, `a` plane, `b` plane).
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LabImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }
}

pub fn rgb_to_lab(img: &ColorImage) -> LabImage {
    let n = img.pixel_count();
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let lab = srgb_to_lab([img.data()[i], img.data()[n + i], img.data()[2 * n + i]]);
        for c in 0..3 {
            data[c * n + i] = lab[c];
        }
    }
    LabImage { width: img.width(), height: img.height(), data }
}

/// Inverse of [`rgb_to_lab`], clamping out-of-gamut samples to `[0, 1]`.
pub fn lab_to_rgb(lab: &LabImage) -> ColorImage {
    let n = lab.width * lab.height;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let rgb = lab_to_srgb([lab.data[i], lab.data[n + i], lab.data[2 * n + i]]);
        for c in 0..3 {
            data[c * n + i] = rgb[c];
        }
    }
    ColorImage::new(lab.width, lab.height, data).expect("clamped samples are valid")
}
