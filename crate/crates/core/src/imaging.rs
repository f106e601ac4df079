//! Images, latent codes and file I/O.
//!
//! Both carriers store their samples row-major as height × width × channels.
//! Conversions to batched `N × C × H × W` tensors are provided for the
//! networks.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::FilterType;
use image::{ImageError, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StegoError};
use crate::nn::{Real, Tensor};

/// Number of channels in a latent code.
pub const LATENT_CHANNELS: usize = 4;
/// Spatial reduction between an image and its latent code.
pub const LATENT_FACTOR: usize = 8;

fn hwc_to_chw<T: Real>(h: usize, w: usize, c: usize, src: &[f32], dst: &mut [T]) {
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                dst[(ch * h + y) * w + x] = T::lit(src[(y * w + x) * c + ch] as f64);
            }
        }
    }
}

fn chw_to_hwc<T: Real>(h: usize, w: usize, c: usize, src: &[T]) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x].f64() as f32;
            }
        }
    }
    out
}

/// An RGB image with samples in `[0, 1]` and both sides divisible by 8.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_image_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(StegoError::invalid(format!(
                "image data has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(StegoError::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Like [`ImageTensor::new`] but clamps into `[0, 1]`. Non-finite values
    /// are a numeric error.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StegoError::Numeric("non-finite pixel value".into()));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.height / LATENT_FACTOR, self.width / LATENT_FACTOR)
    }

    /// `1 × 3 × H × W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Self::batch_to_tensor(std::slice::from_ref(self))
    }

    /// Stacks equally sized images into `N × 3 × H × W`.
    pub fn batch_to_tensor<T: Real>(images: &[ImageTensor]) -> Tensor<T> {
        assert!(!images.is_empty(), "empty image batch");
        let (h, w) = images[0].dims();
        let per = 3 * h * w;
        let mut data = vec![T::zero(); images.len() * per];
        for (img, dst) in images.iter().zip(data.chunks_mut(per)) {
            assert_eq!(img.dims(), (h, w), "mixed image sizes in batch");
            hwc_to_chw(h, w, 3, &img.data, dst);
        }
        Tensor::new(&[images.len(), 3, h, w], data)
    }

    /// Item `index` of an `N × 3 × H × W` tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != 3 || index >= n {
            return Err(StegoError::invalid(format!(
                "cannot take image {index} from tensor of shape {:?}",
                t.shape()
            )));
        }
        let per = 3 * h * w;
        let data = chw_to_hwc(h, w, 3, &t.data()[index * per..(index + 1) * per]);
        Self::from_clamped(h, w, data)
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Quantizes to 8 bits with round-half-away-from-zero.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Swaps the red and blue channels.
    pub fn swap_rb(&self) -> Self {
        let mut data = self.data.clone();
        for px in data.chunks_mut(3) {
            px.swap(0, 2);
        }
        Self { data, ..*self }
    }
}

/// A latent code of shape `(H/8) × (W/8) × 4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentCode {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(StegoError::invalid("latent code must be non-empty"));
        }
        if data.len() != height * width * LATENT_CHANNELS {
            return Err(StegoError::invalid(format!(
                "latent data has {} values, expected {height}x{width}x{LATENT_CHANNELS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StegoError::Numeric("non-finite latent value".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width * LATENT_CHANNELS])
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Size of the image this code decodes to.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.height * LATENT_FACTOR, self.width * LATENT_FACTOR)
    }

    /// Elementwise sum, the stego latent `z + e`.
    pub fn add(&self, other: &LatentCode) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(StegoError::invalid(format!(
                "latent shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::new(self.height, self.width, data)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Self::batch_to_tensor(std::slice::from_ref(self))
    }

    pub fn batch_to_tensor<T: Real>(codes: &[LatentCode]) -> Tensor<T> {
        assert!(!codes.is_empty(), "empty latent batch");
        let (h, w) = codes[0].dims();
        let per = LATENT_CHANNELS * h * w;
        let mut data = vec![T::zero(); codes.len() * per];
        for (code, dst) in codes.iter().zip(data.chunks_mut(per)) {
            assert_eq!(code.dims(), (h, w), "mixed latent sizes in batch");
            hwc_to_chw(h, w, LATENT_CHANNELS, &code.data, dst);
        }
        Tensor::new(&[codes.len(), LATENT_CHANNELS, h, w], data)
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != LATENT_CHANNELS || index >= n {
            return Err(StegoError::invalid(format!(
                "cannot take latent {index} from tensor of shape {:?}",
                t.shape()
            )));
        }
        let per = c * h * w;
        Self::new(h, w, chw_to_hwc(h, w, c, &t.data()[index * per..(index + 1) * per]))
    }
}

pub fn check_image_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(LATENT_FACTOR) || !width.is_multiple_of(LATENT_FACTOR) {
        return Err(StegoError::Config(format!(
            "image size {height}x{width} must be non-zero and divisible by {LATENT_FACTOR}"
        )));
    }
    Ok(())
}

fn image_error(path: &Path, err: ImageError) -> StegoError {
    match err {
        ImageError::IoError(source) => StegoError::io(path, source),
        other => StegoError::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Decodes a PNG or JPEG file and resizes it bilinearly to `size`
/// (height, width) when needed.
pub fn load_image(path: impl AsRef<Path>, size: (usize, usize)) -> Result<ImageTensor> {
    let path = path.as_ref();
    check_image_dims(size.0, size.1)?;
    let decoded = image::open(path).map_err(|e| image_error(path, e))?;
    let mut rgb = decoded.to_rgb8();
    if rgb.dimensions() != (size.1 as u32, size.0 as u32) {
        rgb = image::imageops::resize(&rgb, size.1 as u32, size.0 as u32, FilterType::Triangle);
    }
    ImageTensor::from_rgb8(&rgb)
}

/// JPEG quality used when the output path has a JPEG extension.
pub const SAVE_JPEG_QUALITY: u8 = 95;

/// Writes an 8-bit PNG or JPEG chosen by the file extension.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).map_err(|e| image_error(path, e))?;
    let rgb = img.to_rgb8();
    match format {
        ImageFormat::Png => rgb
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| image_error(path, e)),
        ImageFormat::Jpeg => {
            let file = File::create(path).map_err(|e| StegoError::io(path, e))?;
            let mut enc = JpegEncoder::new_with_quality(BufWriter::new(file), SAVE_JPEG_QUALITY);
            enc.encode_image(&rgb).map_err(|e| image_error(path, e))
        }
        other => Err(StegoError::Usage(format!(
            "unsupported output format {other:?} for {}",
            path.display()
        ))),
    }
}
