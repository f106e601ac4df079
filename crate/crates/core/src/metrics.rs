//! Recovery and image-quality metrics, and the evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StegoError};
use crate::imaging::ImageTensor;
use crate::losses::check_same_dims;
use crate::message::Message;

/// Fraction of positions where the two messages agree.
pub fn bit_accuracy(m: &Message, m_prime: &Message) -> Result<f64> {
    let wrong = m.hamming(m_prime)?;
    Ok(1.0 - wrong as f64 / m.len() as f64)
}

/// 1 when every bit matches, else 0.
pub fn message_accuracy(m: &Message, m_prime: &Message) -> Result<u8> {
    Ok(u8::from(m.hamming(m_prime)? == 0))
}

/// PSNR reported for images whose MSE is below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

/// Peak signal-to-noise ratio in dB for peak value 1.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let mse = crate::losses::image_mse(a, b)?;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the "valid" region only.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03 and peak 1, computed per channel over valid window
/// positions and averaged. Images smaller than the window use a window
/// covering the whole image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_dims(a, b)?;
    let (h, w) = a.dims();
    let win = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let xa: Vec<f64> = (0..h * w).map(|i| f64::from(a.data()[i * 3 + c])).collect();
        let xb: Vec<f64> = (0..h * w).map(|i| f64::from(b.data()[i * 3 + c])).collect();
        total += if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
            ssim_channel_windowed(&xa, &xb, h, w, &win)
        } else {
            ssim_global(&xa, &xb)
        };
    }
    Ok(total / 3.0)
}

fn ssim_channel_windowed(xa: &[f64], xb: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> f64 {
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect() };
    let (mu_a, oh, ow) = filter_valid(xa, h, w, win);
    let (mu_b, ..) = filter_valid(xb, h, w, win);
    let (aa, ..) = filter_valid(&prod(|p, _| p * p), h, w, win);
    let (bb, ..) = filter_valid(&prod(|_, q| q * q), h, w, win);
    let (ab, ..) = filter_valid(&prod(|p, q| p * q), h, w, win);
    let mut sum = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    sum / (oh * ow) as f64
}

fn ssim_global(xa: &[f64], xb: &[f64]) -> f64 {
    let n = xa.len() as f64;
    let ma = xa.iter().sum::<f64>() / n;
    let mb = xb.iter().sum::<f64>() / n;
    let va = xa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
    let vb = xb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
    let cov = xa.iter().zip(xb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Number of messages per count of wrong bits.
pub fn wrong_bit_histogram<'a, I>(pairs: I) -> Result<BTreeMap<usize, usize>>
where
    I: IntoIterator<Item = (&'a Message, &'a Message)>,
{
    let mut hist = BTreeMap::new();
    for (m, mp) in pairs {
        *hist.entry(m.hamming(mp)?).or_insert(0) += 1;
    }
    if hist.is_empty() {
        return Err(StegoError::invalid("histogram needs at least one message pair"));
    }
    Ok(hist)
}

/// Metrics for one evaluated (image, message) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub bit_acc: f64,
    pub message_correct: bool,
    pub wrong_bits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Mean bit accuracy as a percentage.
    pub bit_acc: f64,
    /// Share of exactly recovered messages as a percentage.
    pub message_acc: f64,
    pub wrong_bit_histogram: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub d: usize,
    pub perceptual_label: String,
    pub psnr_cap_db: f64,
    pub per_image: Vec<ImageEval>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// Aggregates rows in their given order, so the result does not depend
    /// on how the rows were computed.
    pub fn from_rows(d: usize, perceptual_label: &str, per_image: Vec<ImageEval>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(StegoError::Usage("nothing to evaluate".into()));
        }
        let n = per_image.len() as f64;
        let mean = |f: &dyn Fn(&ImageEval) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let mut hist = BTreeMap::new();
        for r in &per_image {
            *hist.entry(r.wrong_bits).or_insert(0) += 1;
        }
        let aggregate = Aggregate {
            count: per_image.len(),
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            perceptual: mean(&|r| r.perceptual),
            bit_acc: 100.0 * mean(&|r| r.bit_acc),
            message_acc: 100.0 * mean(&|r| if r.message_correct { 1.0 } else { 0.0 }),
            wrong_bit_histogram: hist,
        };
        Ok(Self {
            d,
            perceptual_label: perceptual_label.to_string(),
            psnr_cap_db: PSNR_CAP_DB,
            per_image,
            aggregate,
        })
    }

    /// Per-image table followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("image,PSNR,SSIM,{},Bit Acc (%),Message Acc (%),wrong bits\n", self.perceptual_label);
        for r in &self.per_image {
            out += &format!(
                "{},{:.6},{:.6},{:.6},{:.4},{},{}\n",
                r.name,
                r.psnr,
                r.ssim,
                r.perceptual,
                100.0 * r.bit_acc,
                if r.message_correct { 100 } else { 0 },
                r.wrong_bits
            );
        }
        let a = &self.aggregate;
        out += &format!(
            "mean,{:.6},{:.6},{:.6},{:.4},{:.4},\n",
            a.psnr, a.ssim, a.perceptual, a.bit_acc, a.message_acc
        );
        out
    }

    pub fn histogram_csv(&self) -> String {
        histogram_csv(&self.aggregate.wrong_bit_histogram, self.d)
    }
}

/// `wrong_bits,messages` for every count from 0 to `d`.
pub fn histogram_csv(hist: &BTreeMap<usize, usize>, d: usize) -> String {
    let mut out = String::from("wrong_bits,messages\n");
    for k in 0..=d {
        out += &format!("{k},{}\n", hist.get(&k).copied().unwrap_or(0));
    }
    out
}
