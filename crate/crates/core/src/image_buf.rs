//! Dense float images (RGB or single-channel).

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major, channel-interleaved float image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: T) -> Self {
        Self { width, height, channels, data: vec![v; width * height * channels] }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.idx(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = self.idx(x, y) + c;
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn same_shape(&self, o: &Self) -> Result<()> {
        if self.width != o.width || self.height != o.height || self.channels != o.channels {
            return Err(Error::ResolutionMismatch(self.width, self.height, o.width, o.height));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at +0.5),
    /// clamping to the border.
    pub fn sample_bilinear(&self, fx: f64, fy: f64, c: usize) -> T {
        let x = (fx - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (fy - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = T::lit(x - x0 as f64);
        let ty = T::lit(y - y0 as f64);
        let one = T::one();
        let top = self.get(x0, y0, c) * (one - tx) + self.get(x1, y0, c) * tx;
        let bot = self.get(x0, y1, c) * (one - tx) + self.get(x1, y1, c) * tx;
        top * (one - ty) + bot * ty
    }

    /// Writes an 8-bit PNG; values are clamped to [0, 1] here and only here.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).map(|im| im.save(path)),
            3 => image::RgbImage::from_raw(w, h, bytes).map(|im| im.save(path)),
            c => return Err(Error::Config(format!("cannot write {c}-channel PNG"))),
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Image { path: path.to_path_buf(), source: e }),
            None => Err(Error::Config("image buffer size mismatch".into())),
        }
    }

    /// Loads a PNG (or any format the `image` crate decodes) as RGB in [0, 1].
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| T::lit(b as f64 / 255.0)).collect();
        Ok(Self { width: w as usize, height: h as usize, channels: 3, data })
    }

    pub fn load_gray_u8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Ok((w as usize, h as usize, g.into_raw()))
    }
}

pub fn save_gray_u8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Config("label buffer size mismatch".into()))?
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}
