//! Image containers, PNG I/O, resampling, query lattices and the training
//! data pipeline.

mod dataset;
mod resample;
mod query;

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub use dataset::{
    load_dataset, sample_scale, sample_training_batch, synth_stereo_dataset, BatchConfig,
    DatasetPair, Manifest, ManifestEntry, StereoDataset, TrainingBatch, MAX_CROP_ATTEMPTS,
};
pub use query::{make_query_grid, nearest_cell, QueryGrid};
pub use resample::{bicubic_resample, bilinear_mix, bilinear_sample, degrade, degrade_pair, bilinear_upsample, cubic_kernel};

/// An RGB image stored as an `(h*w) x 3` matrix of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Mat,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Mat) -> Result<Self> {
        if pixels.dim() != (height * width, 3) {
            return Err(Error::shape(format!(
                "pixel matrix {:?} does not match {height}x{width}x3",
                pixels.dim()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: Mat::from_elem((height * width, 3), value),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let pixels = Mat::from_shape_fn((height * width, 3), |(p, c)| f(p / width, p % width, c));
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &Mat {
        &self.pixels
    }

    pub fn into_pixels(self) -> Mat {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[[y * self.width + x, c]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[[y * self.width + x, c]] = v;
    }

    /// Rec.601 luma, row-major `h*w`.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .rows()
            .into_iter()
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }

    pub fn clamp01(mut self) -> Self {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    pub fn is_valid(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

/// A rectified left/right pair of equally sized images.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    pub left: Image,
    pub right: Image,
}

impl StereoPair {
    pub fn new(left: Image, right: Image) -> Result<Self> {
        if left.dims() != right.dims() {
            return Err(Error::shape(format!(
                "left {:?} and right {:?} differ in size",
                left.dims(),
                right.dims()
            )));
        }
        Ok(Self { left, right })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.left.dims()
    }

    pub fn swapped(&self) -> StereoPair {
        StereoPair {
            left: self.right.clone(),
            right: self.left.clone(),
        }
    }

    pub fn view(&self, v: crate::View) -> &Image {
        match v {
            crate::View::Left => &self.left,
            crate::View::Right => &self.right,
        }
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::filled(h, w, 0.0);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(y as usize, x as usize, c, p[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

pub fn load_stereo_pair(path_left: impl AsRef<Path>, path_right: impl AsRef<Path>) -> Result<StereoPair> {
    StereoPair::new(load_png(path_left)?, load_png(path_right)?)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([to_u8(img.get(y, x, 0)), to_u8(img.get(y, x, 1)), to_u8(img.get(y, x, 2))])
        });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Writes a row-major `h*w` buffer as a 16-bit grayscale PNG.
pub fn save_gray16(values: &[u16], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
            .ok_or_else(|| Error::shape("gray16 buffer size mismatch"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn load_gray16(path: impl AsRef<Path>) -> Result<(Vec<u16>, usize, usize)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok((g.into_raw(), h, w))
}

pub fn save_gray8(values: &[u8], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, values.to_vec())
            .ok_or_else(|| Error::shape("gray8 buffer size mismatch"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}
