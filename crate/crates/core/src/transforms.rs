//! Image corruptions applied to stego images: during robust training in
//! their differentiable form and in the robustness suite bit-faithfully.

use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{seeded_rng, streams};
use crate::error::{Result, StegoError};
use crate::imaging::ImageTensor;
use crate::nn::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    None,
    GaussianBlur,
    GaussianNoise,
    Rgb2Bgr,
    Jpeg,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::None,
        TransformKind::GaussianBlur,
        TransformKind::GaussianNoise,
        TransformKind::Rgb2Bgr,
        TransformKind::Jpeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::GaussianBlur => "gaussian_blur",
            Self::GaussianNoise => "gaussian_noise",
            Self::Rgb2Bgr => "rgb2bgr",
            Self::Jpeg => "jpeg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| StegoError::Parse(format!("unknown transform {s:?}")))
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One corruption with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    None,
    GaussianBlur { kernel: usize, sigma: f64 },
    /// `seed` fixes the noise draw.
    GaussianNoise { mean: f64, sigma: f64, seed: u64 },
    Rgb2Bgr,
    Jpeg { quality: u8 },
}

/// Parameters for each transform kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub noise_mean: f64,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            blur_kernel: 5,
            blur_sigma: 2.0,
            noise_mean: 0.0,
            noise_sigma: 0.2,
            jpeg_quality: 80,
        }
    }
}

impl From<&RunConfig> for TransformParams {
    fn from(c: &RunConfig) -> Self {
        Self {
            blur_kernel: c.blur_kernel,
            blur_sigma: c.blur_sigma,
            noise_mean: c.noise_mean,
            noise_sigma: c.noise_sigma,
            jpeg_quality: c.jpeg_quality,
        }
    }
}

impl TransformParams {
    pub fn spec(&self, kind: TransformKind, noise_seed: u64) -> TransformSpec {
        match kind {
            TransformKind::None => TransformSpec::None,
            TransformKind::GaussianBlur => TransformSpec::GaussianBlur {
                kernel: self.blur_kernel,
                sigma: self.blur_sigma,
            },
            TransformKind::GaussianNoise => TransformSpec::GaussianNoise {
                mean: self.noise_mean,
                sigma: self.noise_sigma,
                seed: noise_seed,
            },
            TransformKind::Rgb2Bgr => TransformSpec::Rgb2Bgr,
            TransformKind::Jpeg => TransformSpec::Jpeg {
                quality: self.jpeg_quality,
            },
        }
    }

    /// One spec per kind, in [`TransformKind::ALL`] order.
    pub fn suite(&self, noise_seed: u64) -> Vec<TransformSpec> {
        TransformKind::ALL.iter().map(|&k| self.spec(k, noise_seed)).collect()
    }

    /// Uniform choice over the five kinds; the noise seed is drawn from `rng`
    /// as well, so the sequence depends only on the generator state.
    pub fn sample(&self, rng: &mut impl Rng) -> TransformSpec {
        let kind = TransformKind::ALL[rng.random_range(0..TransformKind::ALL.len())];
        let seed = rng.random();
        self.spec(kind, seed)
    }
}

/// [`TransformParams::sample`] with the default parameters.
pub fn sample_train_transform(rng: &mut impl Rng) -> TransformSpec {
    TransformParams::default().sample(rng)
}

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            Self::None => TransformKind::None,
            Self::GaussianBlur { .. } => TransformKind::GaussianBlur,
            Self::GaussianNoise { .. } => TransformKind::GaussianNoise,
            Self::Rgb2Bgr => TransformKind::Rgb2Bgr,
            Self::Jpeg { .. } => TransformKind::Jpeg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::GaussianBlur { kernel, sigma } => {
                if kernel < 3 || kernel % 2 == 0 {
                    return Err(StegoError::invalid(format!("blur kernel must be odd and >= 3, got {kernel}")));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(StegoError::invalid(format!("blur sigma must be positive, got {sigma}")));
                }
            }
            Self::GaussianNoise { mean, sigma, .. } => {
                if !mean.is_finite() || !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(StegoError::invalid(format!("invalid noise parameters ({mean}, {sigma})")));
                }
            }
            Self::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(StegoError::invalid(format!("jpeg quality must be in [1, 100], got {quality}")));
                }
            }
            Self::None | Self::Rgb2Bgr => {}
        }
        Ok(())
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::GaussianBlur { kernel, sigma } => write!(f, "gaussian_blur(kernel={kernel}, sigma={sigma})"),
            Self::GaussianNoise { mean, sigma, .. } => write!(f, "gaussian_noise(mean={mean}, sigma={sigma})"),
            Self::Rgb2Bgr => write!(f, "rgb2bgr"),
            Self::Jpeg { quality } => write!(f, "jpeg(quality={quality})"),
        }
    }
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

pub fn gaussian_kernel_2d(kernel: usize, sigma: f64) -> Vec<f64> {
    let k1 = gaussian_kernel_1d(kernel, sigma);
    k1.iter().flat_map(|a| k1.iter().map(move |b| a * b)).collect()
}

const STD_LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

const STD_CHROMA_QTABLE: [u16; 64] = {
    let mut t = [99u16; 64];
    let head: [[u16; 4]; 4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]];
    let mut i = 0;
    while i < 16 {
        t[(i / 4) * 8 + i % 4] = head[i / 4][i % 4];
        i += 1;
    }
    t
};

/// Luma and chroma quantization tables at `quality`, scaled the way libjpeg
/// scales the standard tables (natural row-major order).
pub fn quant_tables(quality: u8) -> [[f64; 64]; 2] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |t: &[u16; 64]| t.map(|v| ((u32::from(v) * scale + 50) / 100).clamp(1, 255) as f64);
    [scaled(&STD_LUMA_QTABLE), scaled(&STD_CHROMA_QTABLE)]
}

/// Full-range BT.601 RGB → YCbCr on 0..255 values.
const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Differentiable JPEG surrogate on an `N × 3 × H × W` tensor in `[0, 1]`.
///
/// Colour conversion, 8×8 DCT and quantization match a 4:4:4 baseline
/// encoder; rounding is replaced by [`Graph::soft_round`].
pub fn soft_jpeg<T: Real>(g: &mut Graph<T>, x: Var, quality: u8) -> Var {
    let fwd = RGB_TO_YCBCR.map(|r| r.map(|v| v * 255.0));
    let y = g.color_affine(x, fwd, [-128.0, 0.0, 0.0]);
    let coeffs = g.block_dct8(y, false);
    let [luma, chroma] = quant_tables(quality);
    let inv_tables = [luma.map(|q| 1.0 / q), chroma.map(|q| 1.0 / q), chroma.map(|q| 1.0 / q)];
    let scaled = g.mul_block_table(coeffs, &inv_tables);
    let rounded = g.soft_round(scaled);
    let dequant = g.mul_block_table(rounded, &[luma, chroma, chroma]);
    let spatial = g.block_dct8(dequant, true);
    // undo the level shift before inverting the colour transform
    let inv = invert3(RGB_TO_YCBCR);
    let offset = [0, 1, 2].map(|c| inv[c][0] * 128.0 / 255.0);
    let rgb = g.color_affine(spatial, inv.map(|r| r.map(|v| v / 255.0)), offset);
    g.clamp(rgb, 0.0, 1.0)
}

fn blur_graph<T: Real>(g: &mut Graph<T>, x: Var, kernel: usize, sigma: f64) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4();
    let p = kernel / 2;
    if p > h || p > w {
        return Err(StegoError::invalid(format!("blur kernel {kernel} too large for {h}x{w} image")));
    }
    let planes = g.reshape(x, &[n * c, 1, h, w]);
    let padded = g.pad_reflect(planes, p);
    let k = g.constant(Tensor::from_f64(&[1, 1, kernel, kernel], &gaussian_kernel_2d(kernel, sigma)));
    let blurred = g.conv2d(padded, k, None, 1, 0);
    let back = g.reshape(blurred, &[n, c, h, w]);
    Ok(g.clamp(back, 0.0, 1.0))
}

/// Gaussian noise values for a tensor of `len` elements; depends only on
/// `seed`.
pub fn noise_values(len: usize, mean: f64, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    let dist = Normal::new(mean, sigma).map_err(|e| StegoError::invalid(e.to_string()))?;
    let mut rng = seeded_rng(seed, streams::TRANSFORMS);
    Ok((0..len).map(|_| dist.sample(&mut rng)).collect())
}

/// Applies `spec` inside a graph to an `N × 3 × H × W` batch. JPEG uses the
/// differentiable surrogate; the noise draw enters as a constant.
pub fn apply_graph<T: Real>(g: &mut Graph<T>, x: Var, spec: &TransformSpec) -> Result<Var> {
    spec.validate()?;
    Ok(match *spec {
        TransformSpec::None => x,
        TransformSpec::GaussianBlur { kernel, sigma } => blur_graph(g, x, kernel, sigma)?,
        TransformSpec::GaussianNoise { mean, sigma, seed } => {
            let shape = g.shape(x).to_vec();
            let n = noise_values(shape.iter().product(), mean, sigma, seed)?;
            let noise = g.constant(Tensor::from_f64(&shape, &n));
            let noisy = g.add(x, noise);
            g.clamp(noisy, 0.0, 1.0)
        }
        TransformSpec::Rgb2Bgr => g.permute_channels(x, &[2, 1, 0]),
        TransformSpec::Jpeg { quality } => soft_jpeg(g, x, quality),
    })
}

/// Encodes to an in-memory JPEG at `quality` (4:4:4) and decodes it again.
pub fn real_jpeg(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let err = |e: image::ImageError| StegoError::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    };
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&image.to_rgb8())
        .map_err(err)?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg).map_err(err)?;
    ImageTensor::from_rgb8(&decoded.to_rgb8())
}

/// Applies one transform to one image. With `differentiable = false` JPEG
/// goes through a real codec; the other kinds are exact either way.
pub fn apply(spec: &TransformSpec, image: &ImageTensor, differentiable: bool) -> Result<ImageTensor> {
    spec.validate()?;
    match spec {
        TransformSpec::None => Ok(image.clone()),
        TransformSpec::Rgb2Bgr => Ok(image.swap_rb()),
        TransformSpec::Jpeg { quality } if !differentiable => real_jpeg(image, *quality),
        _ => {
            let mut g = Graph::<f64>::new();
            let x = g.constant(image.to_tensor());
            let y = apply_graph(&mut g, x, spec)?;
            ImageTensor::from_tensor(g.value(y), 0)
        }
    }
}
