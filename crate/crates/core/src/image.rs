//! Square RGB images in `[0, 1]` and binary region masks.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor_to_vec;

/// `size x size x 3` image, row-major HWC, values clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    size: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::ShapeMismatch(format!("{} values for a {size}x{size}x3 image", pixels.len())));
        }
        let pixels = pixels.into_iter().map(|v| if v.is_nan() { v } else { v.clamp(0.0, 1.0) }).collect();
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..size * size).flat_map(|_| rgb).collect();
        Self { size, pixels }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.size + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// Sum of squared differences.
    pub fn squared_distance(&self, other: &ImageTensor) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| f64::from(a - b).powi(2)).sum()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        let img = image::RgbImage::from_raw(self.size as u32, self.size as u32, bytes)
            .ok_or_else(|| Error::Format("image buffer size".into()))?;
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Format(format!("png decode: {e}")))?.to_rgb8();
        if img.width() != img.height() {
            return Err(Error::Format("images must be square".into()));
        }
        let size = img.width() as usize;
        let pixels = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Self::new(size, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes)
    }
}

/// Frames side by side, left to right, as one PNG.
pub fn strip_png(frames: &[ImageTensor]) -> Result<Vec<u8>> {
    let size = frames.first().ok_or(Error::EmptySamples)?.size;
    if frames.iter().any(|f| f.size != size) {
        return Err(Error::ShapeMismatch("strip frames differ in size".into()));
    }
    let width = size * frames.len();
    let mut bytes = vec![0u8; width * size * 3];
    for (k, f) in frames.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    bytes[(y * width + k * size + x) * 3 + c] = quantize(f.pixels[(y * size + x) * 3 + c]);
                }
            }
        }
    }
    let img = image::RgbImage::from_raw(width as u32, size as u32, bytes)
        .ok_or_else(|| Error::Format("image buffer size".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary `size x size` mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    size: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    pub fn new(size: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(Error::ShapeMismatch(format!("{} cells for a {size}x{size} mask", cells.len())));
        }
        Ok(Self { size, cells })
    }

    pub fn empty(size: usize) -> Self {
        Self { size, cells: vec![false; size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.size + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.cells[y * self.size + x] = on;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.cells.len().max(1) as f64
    }

    pub fn complement(&self) -> Self {
        Self { size: self.size, cells: self.cells.iter().map(|c| !c).collect() }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes = self.cells.iter().map(|&c| if c { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.size as u32, self.size as u32, bytes)
            .ok_or_else(|| Error::Format("mask buffer size".into()))?;
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Format(format!("png decode: {e}")))?.to_luma8();
        let size = img.width() as usize;
        Self::new(size, img.into_raw().into_iter().map(|v| v >= 128).collect())
    }
}

/// Stacks images into a `(b, h, w, 3)` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
    let size = images.first().map_or(0, |i| i.size);
    if images.iter().any(|i| i.size != size) {
        return Err(Error::ShapeMismatch("images of different sizes in one batch".into()));
    }
    let data: Vec<f32> = images.iter().flat_map(|i| i.pixels.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (images.len(), size, size, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(b, h, w, 3)` tensor into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let (b, h, w, c) = t.dims4()?;
    if h != w || c != 3 {
        return Err(Error::ShapeMismatch(format!("cannot read ({b},{h},{w},{c}) as RGB images")));
    }
    let data = tensor_to_vec(t)?;
    data.chunks(h * w * 3).map(|chunk| ImageTensor::new(h, chunk.to_vec())).collect()
}
