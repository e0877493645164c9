use std::path::Path;

use ::image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Square single-band image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if size == 0 || pixels.len() != size * size {
            return Err(Error::Data(format!(
                "image of side {size} needs {} pixels, got {}",
                size * size,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image { size, pixels })
    }

    /// Builds from `f(row, col)`, clamping into `[0, 1]`.
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let v = f(r, c);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Image { size, pixels }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    /// Bilinear sample at continuous pixel-center coordinates; `None` outside.
    pub(crate) fn sample(&self, y: f32, x: f32) -> Option<f32> {
        let max = (self.size - 1) as f32;
        if !(-0.5..=max + 0.5).contains(&y) || !(-0.5..=max + 0.5).contains(&x) {
            return None;
        }
        let y = y.clamp(0.0, max);
        let x = x.clamp(0.0, max);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.size - 1), (x0 + 1).min(self.size - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Bilinear resize with half-pixel centers. Same size returns a copy.
    pub fn resize(&self, size: usize) -> Image {
        if size == self.size {
            return self.clone();
        }
        let scale = self.size as f32 / size as f32;
        Image::from_fn(size, |r, c| {
            let y = (r as f32 + 0.5) * scale - 0.5;
            let x = (c as f32 + 0.5) * scale - 0.5;
            self.sample(y, x).unwrap_or(0.0)
        })
    }

    /// Loads any grayscale (or color, converted to luma) raster, normalized to
    /// `[0, 1]` by the file's bit depth. Non-square images are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != h {
            return Err(Error::Data(format!("{}: non-square image {w}x{h}", path.display())));
        }
        let luma = img.to_luma32f();
        let pixels = luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(w, pixels)
    }

    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw: Vec<u16> = self.pixels.iter().map(|&v| (v * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.size as u32, self.size as u32, raw).expect("buffer size matches");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
