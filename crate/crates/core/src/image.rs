//! Floating point image tensors and PNG/JPEG conversion.

use std::fmt;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb, Rgba};

use crate::error::{Error, Result};

/// Row-major `height x width x channels` samples in [0, 1].
#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageTensor")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::InvalidArgument(format!(
                "channel count must be 1, 3 or 4, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty image {height}x{width}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::shape(
                format!("{expected} samples"),
                format!("{} samples", data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument(format!(
                "sample {bad} = {} outside [0, 1]",
                data[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a per-pixel function returning one sample per channel.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Internal constructor for data already known to satisfy the invariants.
    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        debug_assert!(data.iter().all(|s| (0.0..=1.0).contains(s)));
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(shape_str(self.dims()), shape_str(other.dims())));
        }
        Ok(())
    }

    /// Pixelwise product with a single-channel field in [0, 1], broadcast over channels.
    pub fn multiply_field(&self, field: &[f64]) -> Result<ImageTensor> {
        if field.len() != self.pixel_count() {
            return Err(Error::shape(
                format!("{} field values", self.pixel_count()),
                format!("{}", field.len()),
            ));
        }
        let c = self.channels;
        let data = self
            .data
            .chunks_exact(c)
            .zip(field)
            .flat_map(|(px, &m)| px.iter().map(move |&s| s * m))
            .collect();
        Ok(Self::from_parts(self.height, self.width, c, data))
    }

    /// Largest centered crop whose sides are multiples of `rows` and `cols`.
    pub fn center_crop_to_multiple(&self, rows: usize, cols: usize) -> Result<ImageTensor> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("grid must be at least 1x1".into()));
        }
        let h = self.height - self.height % rows;
        let w = self.width - self.width % cols;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} smaller than grid {rows}x{cols}",
                self.height, self.width
            )));
        }
        self.crop(
            (self.height - h) / 2,
            (self.width - w) / 2,
            h,
            w,
        )
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self::from_parts(h, w, c, data))
    }

    /// Drops the alpha channel of an RGBA image; other images are returned as-is.
    pub fn without_alpha(&self) -> ImageTensor {
        match self.channels {
            4 => {
                let data = self
                    .data
                    .chunks_exact(4)
                    .flat_map(|px| px[..3].iter().copied())
                    .collect();
                Self::from_parts(self.height, self.width, 3, data)
            }
            _ => self.clone(),
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, bytes): (usize, Vec<u8>) = match img {
            DynamicImage::ImageLuma8(b) => (1, b.as_raw().clone()),
            DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
                (4, img.to_rgba8().into_raw())
            }
            DynamicImage::ImageRgb8(b) => (3, b.as_raw().clone()),
            other if other.color().has_alpha() => (4, other.to_rgba8().into_raw()),
            other => (3, other.to_rgb8().into_raw()),
        };
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_parts(h, w, channels, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&s| quantize(s)).collect()
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_bytes();
        match self.channels {
            1 => DynamicImage::ImageLuma8(
                ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer size"),
            ),
            3 => DynamicImage::ImageRgb8(
                ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer size"),
            ),
            4 => DynamicImage::ImageRgba8(
                ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, bytes).expect("buffer size"),
            ),
            _ => unreachable!("channel invariant"),
        }
    }
}

/// 8-bit quantization, rounding half up.
#[inline]
pub fn quantize(sample: f64) -> u8 {
    (sample * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn shape_str((h, w, c): (usize, usize, usize)) -> String {
    format!("{h}x{w}x{c}")
}

/// Loads a PNG or JPEG. Gray+alpha inputs are widened to RGBA.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ImageTensor::from_dynamic(&img))
}

/// Writes an 8-bit PNG. Alpha is only written for 4-channel tensors.
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.to_dynamic()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(ImageTensor::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(2, 2, 3, vec![0.25; 12]).is_ok());
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        // 0.5 * 255 = 127.5 -> 128
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(127.49 / 255.0), 127);
    }

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let img = ImageTensor::from_fn(3, 5, 3, |y, x, c| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0).unwrap();
        let back = ImageTensor::from_dynamic(&img.to_dynamic());
        assert_eq!(back, img);
    }

    #[test]
    fn png_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageTensor::from_fn(4, 6, 4, |y, x, c| ((y + x + c) % 5) as f64 / 4.0).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dims(), (4, 6, 4));
        assert_eq!(back.to_bytes(), img.to_bytes());
    }

    #[test]
    fn center_crop_to_divisible() {
        let img = ImageTensor::filled(230, 227, 3, 0.5).unwrap();
        let c = img.center_crop_to_multiple(7, 7).unwrap();
        assert_eq!(c.dims(), (224, 224, 3));
    }

    #[test]
    fn multiply_field_broadcasts_over_channels() {
        let img = ImageTensor::filled(1, 2, 3, 0.8).unwrap();
        let out = img.multiply_field(&[0.5, 0.0]).unwrap();
        assert_eq!(out.data(), &[0.4, 0.4, 0.4, 0.0, 0.0, 0.0]);
    }
}
