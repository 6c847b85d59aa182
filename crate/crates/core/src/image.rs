//! In-memory RGB images and PNG round-tripping.
//!
//! Pixels are `f64` in [0, 1], stored planar (channel, row, column) so an
//! image converts to a single-instance [`FeatureMap`] without reshuffling.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>, // CHANNELS * height * width, planar
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; CHANNELS * width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Image::new(width, height);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Clamp every value into [0, 1].
    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Single-instance feature map view (B = 1, C = 3).
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::new([1, CHANNELS, self.height, self.width], self.data.clone())
            .expect("image data is finite by construction")
    }

    /// Stacks images of equal size into one batch.
    pub fn batch(images: &[Image]) -> Result<FeatureMap> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dataset("cannot batch zero images".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * CHANNELS * w * h);
        for img in images {
            if img.width != w || img.height != h {
                return Err(Error::ShapeMismatch(format!(
                    "image {}x{} in a batch of {}x{}",
                    img.width, img.height, w, h
                )));
            }
            data.extend_from_slice(&img.data);
        }
        FeatureMap::new([images.len(), CHANNELS, h, w], data)
    }

    /// 8-bit interleaved RGB rows, top to bottom (the PNG wire layout).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::ImageDecode(format!(
                "expected {} RGB bytes for {}x{}, got {}",
                width * height * 3,
                width,
                height,
                rgb.len()
            )));
        }
        let mut img = Image::new(width, height);
        let mut i = 0;
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    img.set(c, y, x, rgb[i] as f64 / 255.0);
                    i += 1;
                }
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(png_err)?;
        writer.write_image_data(&self.to_rgb8()).map_err(png_err)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
            Error::ImageDecode("png dimensions overflow".into())
        })?];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf[..info.buffer_size()].to_vec(),
            png::ColorType::Rgba => buf[..info.buffer_size()]
                .chunks_exact(4)
                .flat_map(|px| [px[0], px[1], px[2]])
                .collect(),
            png::ColorType::Grayscale => buf[..info.buffer_size()]
                .iter()
                .flat_map(|&g| [g, g, g])
                .collect(),
            other => {
                return Err(Error::ImageDecode(format!("unsupported png color type {other:?}")))
            }
        };
        Image::from_rgb8(w, h, &rgb)
    }
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::ImageDecode(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_at_8_bit() {
        let img = Image::from_fn(9, 7, |c, y, x| {
            ((c * 37 + y * 11 + x * 5) % 256) as f64 / 255.0
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.width(), 9);
        assert_eq!(back.height(), 7);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batching_stacks_instances() {
        let a = Image::from_fn(4, 4, |_, _, _| 0.25);
        let b = Image::from_fn(4, 4, |_, _, _| 0.75);
        let fm = Image::batch(&[a, b]).unwrap();
        assert_eq!(fm.dims(), [2, 3, 4, 4]);
        assert_eq!(fm.get(0, 0, 0, 0), 0.25);
        assert_eq!(fm.get(1, 2, 3, 3), 0.75);
    }

    #[test]
    fn batch_rejects_mixed_sizes() {
        let a = Image::new(4, 4);
        let b = Image::new(5, 4);
        assert!(Image::batch(&[a, b]).is_err());
    }
}
