use std::path::Path;

use crate::error::{Error, Result};

/// Three-channel float image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image needs {} values, got {}",
                height,
                width,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, v: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    /// Pixel by linear index `y * width + x`.
    pub fn at(&self, i: usize) -> [f32; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// 8-bit RGB buffer, values clamped to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ColorType::L8)?;
    Ok(())
}
