//! In-memory image representation and PNG/GIF on-disk formats.

use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, ImageReader, Rgba, RgbaImage};
use ndarray::Array3;

use crate::error::{Error, Result};

/// An RGB image as `[3, height, width]` floats in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub values: Array3<f32>,
}

impl ImageBuf {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        if values.shape()[0] != 3 {
            return Err(Error::shape(
                "ImageBuf::new",
                "[3, h, w]",
                format!("{:?}", values.shape()),
            ));
        }
        Ok(ImageBuf { values })
    }

    /// Solid-color image, useful for fixtures.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut values = Array3::zeros((3, height, width));
        for (c, v) in rgb.iter().enumerate() {
            values.index_axis_mut(ndarray::Axis(0), c).fill(*v);
        }
        ImageBuf { values }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Mean squared error over all channels and pixels.
    pub fn mse(&self, other: &ImageBuf) -> Result<f64> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::shape(
                "ImageBuf::mse",
                format!("{:?}", self.values.shape()),
                format!("{:?}", other.values.shape()),
            ));
        }
        let sum: f64 = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(sum / self.values.len() as f64)
    }

    fn to_rgba(&self) -> RgbaImage {
        let (h, w) = (self.height(), self.width());
        let mut out = RgbaImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| {
                    let v = self.values[[c, y, x]].clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                };
                out.put_pixel(x as u32, y as u32, Rgba([px(0), px(1), px(2), 255]));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgba().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)?.decode()?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut values = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                values[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(ImageBuf { values })
    }
}

/// Writes frames as an animated GIF looping forever at `fps` frames/second.
pub fn save_gif(frames: &[ImageBuf], fps: u32, path: &Path) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::config("cannot write a GIF with zero frames"));
    }
    let fps = fps.max(1);
    let file = std::fs::File::create(path)?;
    let mut encoder = GifEncoder::new(file);
    encoder
        .set_repeat(Repeat::Infinite)
        .map_err(|e| Error::config(format!("gif encoder: {e}")))?;
    let delay = Delay::from_numer_denom_ms(1000, fps);
    for frame in frames {
        encoder
            .encode_frame(Frame::from_parts(frame.to_rgba(), 0, 0, delay))
            .map_err(|e| Error::config(format!("gif encoder: {e}")))?;
    }
    Ok(())
}
