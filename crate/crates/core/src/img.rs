//! Dense row-major float images and PNG conversion.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major `height × width × channels` image of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width as usize * height as usize * channels {
            return Err(Error::InvalidInput(format!(
                "image buffer has {} values, expected {}x{}x{channels}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width as usize * height as usize * channels],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, u: u32, v: u32) -> &[f64] {
        let i = (v as usize * self.width as usize + u as usize) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Loads an 8-bit PNG as RGB divided by 255. No gamma conversion.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::new(w, h, 3, data)
    }

    /// Quantizes to 8 bits (clamped, rounded) and encodes as an RGB PNG.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {}", self.channels)));
        }
        let raw: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width, self.height, raw)
            .ok_or_else(|| Error::InvalidInput("image buffer size mismatch".into()))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save(path)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(&self.to_rgb8()?)
    }

    /// Values snapped to the nearest 8-bit level, as a PNG round trip would produce.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Reads a single-channel 8-bit label map.
pub fn read_label_png(path: &Path) -> Result<(u32, u32, Vec<u32>)> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw().into_iter().map(u32::from).collect()))
}

pub fn write_label_png(path: &Path, width: u32, height: u32, labels: &[u32]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::InvalidInput(format!("label {bad} does not fit in 8 bits")));
    }
    let raw: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(width, height, raw)
        .ok_or_else(|| Error::InvalidInput("label buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_of_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..5 * 4 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = Image::new(5, 4, 3, data).unwrap();
        let path = dir.path().join("a.png");
        img.write_png(&path).unwrap();
        assert_eq!(Image::read_png(&path).unwrap(), img);
        assert_eq!(img.quantized(), img);
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let labels = vec![0, 1, 2, 255, 63, 7];
        write_label_png(&path, 3, 2, &labels).unwrap();
        assert_eq!(read_label_png(&path).unwrap(), (3, 2, labels));
        assert!(write_label_png(&path, 1, 1, &[256]).is_err());
    }

    #[test]
    fn rejects_bad_buffer() {
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
