//! RGB float images and boolean pixel masks.
//!
//! Pixels are stored row-major, three interleaved channels per pixel. Values
//! read from 8-bit sources are `u / 255` with no gamma handling.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::param(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [T; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl Image<f32> {
    pub fn to_f64(&self) -> Image<f64> {
        self.map(f64::from)
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Decodes a PNG (or any format the `image` crate sniffs). Alpha is
    /// composited over a white background.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::ImageRead { path: path.to_path_buf(), msg: e.to_string() })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::ImageRead { path: "<memory>".into(), msg: e.to_string() })?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_alpha() {
            let rgba = img.to_rgba8();
            let mut data = Vec::with_capacity(w * h * 3);
            for p in rgba.pixels() {
                let a = f32::from(p[3]) / 255.0;
                for c in 0..3 {
                    data.push(f32::from(p[c]) / 255.0 * a + (1.0 - a));
                }
            }
            Self { width: w, height: h, data }
        } else {
            let rgb = img.to_rgb8();
            Self { width: w, height: h, data: rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect() }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf: ImageBuffer<Rgb<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
                .ok_or_else(|| Error::param("image dimensions overflow"))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Validation(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn mean_rgb(&self, mask: &Bitmap) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &on) in mask.bits().iter().enumerate() {
            if on {
                for c in 0..3 {
                    acc[c] += f64::from(self.data[i * 3 + c]);
                }
                n += 1;
            }
        }
        acc.map(|v| v / n.max(1) as f64)
    }
}

impl Image<f64> {
    pub fn to_f32(&self) -> Image<f32> {
        self.map(|v| v as f32)
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Boolean per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmap {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::param(format!("bitmap has {} bits, expected {}x{}", bits.len(), width, height)));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersects(&self, other: &Bitmap) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)`, `None` when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.bits.iter().map(|&b| if b { 255u8 } else { 0 }).collect::<Vec<u8>>(),
        )
        .ok_or_else(|| Error::param("bitmap dimensions overflow"))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Validation(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }
}
