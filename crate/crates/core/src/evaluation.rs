//! Cover-mode evaluation: embed fresh messages into a set of images, read
//! them back, and aggregate image quality and recovery metrics, optionally
//! after a corruption.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{seeded_rng, streams, Dataset};
use crate::error::{Result, StegoError};
use crate::imaging::ImageTensor;
use crate::losses::PerceptualMetric;
use crate::message::Message;
use crate::message_codec::StegoSystem;
use crate::metrics::{bit_accuracy, psnr, ssim, EvalReport, ImageEval};
use crate::transforms::{apply, TransformKind, TransformParams, TransformSpec};

const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Fresh random messages per image.
    pub n_messages: usize,
    /// Seeds the messages and the noise transform.
    pub seed: u64,
    /// Round stego images to 8 bits, as when they are written to a file.
    pub quantize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_messages: 1,
            seed: 0,
            quantize: true,
        }
    }
}

/// Stego images for every (image, message) pair.
#[derive(Clone, Debug)]
pub struct EmbeddedSet {
    pub names: Vec<String>,
    pub covers: Vec<ImageTensor>,
    pub messages: Vec<Message>,
    pub stego: Vec<ImageTensor>,
}

/// Messages for `n_images × n_messages` pairs, image-major; depends only on
/// `seed`.
pub fn sample_messages(n_images: usize, n_messages: usize, d: usize, seed: u64) -> Result<Vec<Message>> {
    let mut rng = seeded_rng(seed, streams::EVAL);
    (0..n_images * n_messages).map(|_| Message::generate(d, &mut rng)).collect()
}

pub fn embed_dataset(system: &StegoSystem, data: &Dataset, opts: &EvalOptions) -> Result<EmbeddedSet> {
    if data.is_empty() || opts.n_messages == 0 {
        return Err(StegoError::Usage("nothing to evaluate: empty dataset".into()));
    }
    let messages = sample_messages(data.len(), opts.n_messages, system.d(), opts.seed)?;
    let mut names = Vec::with_capacity(messages.len());
    let mut covers = Vec::with_capacity(messages.len());
    for (name, img) in data.names.iter().zip(&data.images) {
        for j in 0..opts.n_messages {
            names.push(if opts.n_messages == 1 { name.clone() } else { format!("{name}#{j}") });
            covers.push(img.clone());
        }
    }
    let mut stego = Vec::with_capacity(covers.len());
    for (c, m) in covers.chunks(EVAL_BATCH).zip(messages.chunks(EVAL_BATCH)) {
        stego.extend(system.embed_batch(c, m)?);
    }
    if opts.quantize {
        stego = stego.iter().map(|s| ImageTensor::from_rgb8(&s.to_rgb8())).collect::<Result<_>>()?;
    }
    Ok(EmbeddedSet {
        names,
        covers,
        messages,
        stego,
    })
}

fn extract_all(system: &StegoSystem, images: &[ImageTensor]) -> Result<Vec<Message>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        for logits in system.extract_batch(chunk)? {
            out.push(Message::from_logits(&logits)?);
        }
    }
    Ok(out)
}

/// Full report on an already embedded set.
pub fn evaluate_embedded(system: &StegoSystem, set: &EmbeddedSet, metric: &dyn PerceptualMetric) -> Result<EvalReport> {
    let recovered = extract_all(system, &set.stego)?;
    let rows = (0..set.stego.len())
        .into_par_iter()
        .map(|i| {
            let (cover, stego) = (&set.covers[i], &set.stego[i]);
            let (m, r) = (&set.messages[i], &recovered[i]);
            let wrong = m.hamming(r)?;
            Ok(ImageEval {
                name: set.names[i].clone(),
                psnr: psnr(cover, stego)?,
                ssim: ssim(cover, stego)?,
                perceptual: metric.distance(cover, stego)?,
                bit_acc: bit_accuracy(m, r)?,
                message_correct: wrong == 0,
                wrong_bits: wrong,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(system.d(), metric.name(), rows)
}

pub fn evaluate(system: &StegoSystem, data: &Dataset, opts: &EvalOptions, metric: &dyn PerceptualMetric) -> Result<EvalReport> {
    evaluate_embedded(system, &embed_dataset(system, data, opts)?, metric)
}

/// Message accuracy (fraction) over `data` without the image metrics; used
/// for model selection during training.
pub fn message_accuracy_only(system: &StegoSystem, data: &Dataset, opts: &EvalOptions) -> Result<(f64, f64)> {
    let set = embed_dataset(system, data, opts)?;
    let recovered = extract_all(system, &set.stego)?;
    let n = recovered.len() as f64;
    let mut bits = 0.0;
    let mut exact = 0.0;
    for (m, r) in set.messages.iter().zip(&recovered) {
        let acc = bit_accuracy(m, r)?;
        bits += acc;
        exact += f64::from(u8::from(acc == 1.0));
    }
    Ok((bits / n, exact / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: TransformKind,
    pub spec: TransformSpec,
    /// Percentages.
    pub bit_acc: f64,
    pub message_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub d: usize,
    pub count: usize,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn row(&self, kind: TransformKind) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("transform,parameters,Bit Acc (%),Message Acc (%)\n");
        for r in &self.rows {
            out += &format!("{},\"{}\",{:.4},{:.4}\n", r.kind, r.spec, r.bit_acc, r.message_acc);
        }
        out
    }
}

/// Bit and message accuracy under each transform of `params`, using the
/// bit-faithful implementations. The same stego images and messages serve
/// every row, so the `none` row equals [`evaluate`] on the same options.
pub fn robustness(system: &StegoSystem, data: &Dataset, params: &TransformParams, opts: &EvalOptions) -> Result<RobustnessReport> {
    let set = embed_dataset(system, data, opts)?;
    let mut rows = Vec::new();
    for spec in params.suite(opts.seed) {
        let corrupted = set
            .stego
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                // a distinct noise draw per image
                let s = match spec {
                    TransformSpec::GaussianNoise { mean, sigma, seed } => TransformSpec::GaussianNoise {
                        mean,
                        sigma,
                        seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
                    },
                    other => other,
                };
                apply(&s, img, false)
            })
            .collect::<Result<Vec<_>>>()?;
        let recovered = extract_all(system, &corrupted)?;
        let n = recovered.len() as f64;
        let mut bits = 0.0;
        let mut exact = 0.0;
        for (m, r) in set.messages.iter().zip(&recovered) {
            let acc = bit_accuracy(m, r)?;
            bits += acc;
            exact += f64::from(u8::from(acc == 1.0));
        }
        rows.push(RobustnessRow {
            kind: spec.kind(),
            spec,
            bit_acc: 100.0 * (bits / n),
            message_acc: 100.0 * (exact / n),
        });
    }
    Ok(RobustnessReport {
        d: system.d(),
        count: set.stego.len(),
        rows,
    })
}
