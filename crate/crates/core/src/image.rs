//! Floating-point image containers and PNG I/O.
//!
//! Pixel values live in `[0, 1]` everywhere inside the crate. Conversion to
//! integer samples happens only when reading or writing files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted side length for either image type.
pub const MIN_SIDE: usize = 8;

/// Weights used to project RGB onto a single luma channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Luma {
    /// `0.299 R + 0.587 G + 0.114 B`
    #[default]
    Rec601,
    /// `0.2126 R + 0.7152 G + 0.0722 B`
    Rec709,
}

impl Luma {
    pub const fn weights(self) -> [f64; 3] {
        match self {
            Luma::Rec601 => [0.299, 0.587, 0.114],
            Luma::Rec709 => [0.2126, 0.7152, 0.0722],
        }
    }

    #[inline]
    pub fn apply(self, r: f64, g: f64, b: f64) -> f64 {
        // Written around G so channel-equal pixels map to their common value
        // exactly; algebraically the same weighted sum since weights sum to 1.
        let [wr, _, wb] = self.weights();
        (g + wr * (r - g) + wb * (b - g)).clamp(0.0, 1.0)
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::InvalidImage(format!(
            "{width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
        )));
    }
    Ok(())
}

fn check_values(data: &[f64]) -> Result<()> {
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidImage(format!("sample {i} = {v} is outside [0, 1]")));
    }
    Ok(())
}

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        check_values(&data)?;
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Reads a PNG (8 or 16 bit). Color files are projected with Rec.601 luma.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?;
        match img.color() {
            image::ColorType::L8 | image::ColorType::La8 => {
                let buf = img.to_luma8();
                let data = buf.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
                Self::new(buf.width() as usize, buf.height() as usize, data)
            }
            image::ColorType::L16 | image::ColorType::La16 => {
                let buf = img.to_luma16();
                let data = buf.as_raw().iter().map(|&v| f64::from(v) / 65535.0).collect();
                Self::new(buf.width() as usize, buf.height() as usize, data)
            }
            _ => Ok(ColorImage::load(path)?.to_gray(Luma::Rec601)),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| to_u8(v)).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }

    pub fn save16(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| to_u16(v)).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }

    /// Resamples with a triangle filter; returns a copy when the size already matches.
    pub fn resized(&self, width: usize, height: usize) -> Result<GrayImage> {
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        check_dims(width, height)?;
        let src: image::ImageBuffer<image::Luma<f32>, Vec<f32>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.iter().map(|&v| v as f32).collect())
                .expect("buffer length matches dimensions");
        let out = image::imageops::resize(&src, width as u32, height as u32, image::imageops::FilterType::Triangle);
        let data = out.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect();
        GrayImage::new(width, height, data)
    }

    /// Quantizes to 8 bits and back, matching what a saved PNG would reload as.
    pub fn quantized(&self) -> GrayImage {
        let data = self.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect();
        GrayImage { width: self.width, height: self.height, data }
    }

    /// Replicates the gray value into all three channels.
    pub fn to_color(&self) -> ColorImage {
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ColorImage { width: self.width, height: self.height, data }
    }
}

/// Three-channel RGB image stored as planes (`R` plane, then `G`, then `B`).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ColorImage {
    /// `data` is planar, `3 * height * width` samples.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != 3 * width * height {
            return Err(Error::shape(3 * width * height, data.len()));
        }
        check_values(&data)?;
        Ok(Self { width, height, data })
    }

    /// Builds an image from arbitrary reals, clamping into `[0, 1]`.
    /// Non-finite samples are rejected.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite sample".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(width, height, data)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let n = width * height;
        let mut data = vec![0.0; 3 * n];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                let i = y * width + x;
                data[i] = px[0];
                data[n + i] = px[1];
                data[2 * n + i] = px[2];
            }
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Planar samples.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let n = self.pixel_count();
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn to_gray(&self, luma: Luma) -> GrayImage {
        let n = self.pixel_count();
        let data = (0..n)
            .map(|i| luma.apply(self.data[i], self.data[n + i], self.data[2 * n + i]).clamp(0.0, 1.0))
            .collect();
        GrayImage { width: self.width, height: self.height, data }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let interleaved: Vec<f64> = match img.color() {
            image::ColorType::L16
            | image::ColorType::La16
            | image::ColorType::Rgb16
            | image::ColorType::Rgba16 => {
                img.to_rgb16().as_raw().iter().map(|&v| f64::from(v) / 65535.0).collect()
            }
            _ => img.to_rgb8().as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        };
        Self::new(w, h, deinterleave(&interleaved, w * h))
    }

    /// Writes an 8-bit RGB PNG, rounding half up.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }

    pub fn save16(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.pixel_count();
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(to_u16(self.data[c * n + i]));
            }
        }
        let buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer length matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }

    /// Interleaved 8-bit samples (`RGBRGB...`).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.pixel_count();
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(to_u8(self.data[c * n + i]));
            }
        }
        raw
    }

    /// Encodes the image as an 8-bit PNG in memory.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions")
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Resamples with a triangle filter; returns a copy when the size already matches.
    pub fn resized(&self, width: usize, height: usize) -> Result<ColorImage> {
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        check_dims(width, height)?;
        let n = self.pixel_count();
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(self.data[c * n + i] as f32);
            }
        }
        let src = image::Rgb32FImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        let out = image::imageops::resize(&src, width as u32, height as u32, image::imageops::FilterType::Triangle);
        let flat: Vec<f64> = out.into_raw().into_iter().map(f64::from).collect();
        ColorImage::from_clamped(width, height, deinterleave(&flat, width * height))
    }

    /// Quantizes to 8 bits and back, matching what a saved PNG would reload as.
    pub fn quantized(&self) -> ColorImage {
        let data = self.data.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect();
        ColorImage { width: self.width, height: self.height, data }
    }
}

fn deinterleave(src: &[f64], n: usize) -> Vec<f64> {
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = src[3 * i + c];
        }
    }
    data
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[inline]
fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

/// Rec.601 luma projection.
pub fn rgb_to_gray(img: &ColorImage) -> GrayImage {
    img.to_gray(Luma::Rec601)
}

pub fn replicate_gray(img: &GrayImage) -> ColorImage {
    img.to_color()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_projects_to_one() {
        let img = ColorImage::filled(8, 8, [1.0, 1.0, 1.0]).unwrap();
        assert!(rgb_to_gray(&img).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pure_red_projects_to_red_weight() {
        let img = ColorImage::filled(8, 8, [1.0, 0.0, 0.0]).unwrap();
        assert!(rgb_to_gray(&img).data().iter().all(|&v| v == 0.299));
    }

    #[test]
    fn replicate_then_project_is_identity() {
        let g = GrayImage::from_fn(9, 11, |x, y| ((x * 7 + y * 13) % 17) as f64 / 16.0).unwrap();
        let c = replicate_gray(&g);
        for y in 0..g.height() {
            for x in 0..g.width() {
                let [r, gg, b] = c.get(x, y);
                assert_eq!(r, g.get(x, y));
                assert_eq!(gg, r);
                assert_eq!(b, r);
            }
        }
        assert_eq!(rgb_to_gray(&c), g);
    }

    #[test]
    fn rejects_out_of_range_and_tiny() {
        assert!(GrayImage::new(8, 8, vec![1.5; 64]).is_err());
        assert!(GrayImage::new(4, 4, vec![0.5; 16]).is_err());
        assert!(ColorImage::new(8, 8, vec![0.5; 64]).is_err());
        assert!(ColorImage::from_clamped(8, 8, vec![f64::NAN; 192]).is_err());
    }

    #[test]
    fn png_roundtrip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = ColorImage::from_fn(10, 8, |x, y| [x as f64 / 9.0, y as f64 / 7.0, 0.25]).unwrap();
        let p8 = dir.path().join("a.png");
        img.save(&p8).unwrap();
        let back = ColorImage::load(&p8).unwrap();
        assert_eq!(back, img.quantized());

        let p16 = dir.path().join("b.png");
        img.save16(&p16).unwrap();
        let back16 = ColorImage::load(&p16).unwrap();
        for (a, b) in back16.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }

        let g = rgb_to_gray(&img);
        let pg = dir.path().join("g.png");
        g.save16(&pg).unwrap();
        let gb = GrayImage::load(&pg).unwrap();
        for (a, b) in gb.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn resize_keeps_constants_and_shortcuts_same_size() {
        let img = ColorImage::filled(16, 12, [0.2, 0.4, 0.8]).unwrap();
        assert_eq!(img.resized(16, 12).unwrap(), img);
        let small = img.resized(8, 8).unwrap();
        assert_eq!(small.dims(), (8, 8));
        for (a, b) in small.get(3, 3).iter().zip([0.2, 0.4, 0.8]) {
            assert!((a - b).abs() < 1e-6);
        }
        let g = GrayImage::filled(8, 8, 0.3).unwrap().resized(24, 16).unwrap();
        assert!(g.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(to_u8(0.5 / 255.0), 1);
        assert_eq!(to_u8(0.499 / 255.0), 0);
        assert_eq!(to_u8(1.0), 255);
    }
}
