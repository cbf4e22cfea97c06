//! Planar RGB images with values in `[-1, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Error, Result};

/// A channel-major (`C × H × W`) real image. Pixel values live in `[-1, 1]`
/// by convention; PNG export maps that range onto `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure(data.len() == channels * height * width, || {
            format!(
                "image buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )
        })?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Translate by whole pixels, filling uncovered pixels with zero.
    pub fn shifted(&self, dy: isize, dx: isize) -> Self {
        let mut out = Self::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let sy = y as isize - dy;
                if sy < 0 || sy >= self.height as isize {
                    continue;
                }
                for x in 0..self.width {
                    let sx = x as isize - dx;
                    if sx < 0 || sx >= self.width as isize {
                        continue;
                    }
                    out.set(c, y, x, self.get(c, sy as usize, sx as usize));
                }
            }
        }
        out
    }

    /// `(C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (self.channels, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Validation(format!("expected rank-3 image tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(c, h, w, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        ensure(self.channels == 3, || "PNG export needs 3 channels".into())?;
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| to_byte(self.get(c, y, x)));
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, from_byte(px.0[c]));
            }
        }
        Ok(out)
    }
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Stack images into a `(B, C, H, W)` tensor.
pub fn stack_images(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("cannot stack an empty image batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        ensure(img.shape() == (c, h, w), || "image batch has mixed shapes".into())?;
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Split a `(B, C, H, W)` tensor into images.
pub fn unstack_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let b = t.dim(0)?;
    (0..b).map(|i| ImageTensor::from_tensor(&t.get(i)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageTensor::zeros(3, 4, 5);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32 / 60.0) * 2.0 - 1.0;
        }
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 1.0 / 127.5);
    }

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
    }

    #[test]
    fn shift_moves_content() {
        let mut img = ImageTensor::zeros(1, 3, 3);
        img.set(0, 1, 1, 1.0);
        let s = img.shifted(1, -1);
        assert_eq!(s.get(0, 2, 0), 1.0);
        assert_eq!(s.data().iter().filter(|v| **v != 0.0).count(), 1);
    }
}
