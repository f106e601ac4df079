//! The training loop for the message encoder and decoder on top of a frozen
//! latent codec.
//!
//! Each step samples a batch of cached latents and fresh messages, embeds,
//! optionally corrupts the stego images, decodes the messages, and takes
//! one AdamW step on the composite loss. The curriculum decides which batch
//! is used and whether transforms and the log-sum-exp term are active.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{codec_from_config, encode_batch, LatentCodec};
use crate::config::{PerceptualKind, RunConfig};
use crate::data::{probe_split, seeded_rng, streams, Dataset};
use crate::error::{Result, StegoError};
use crate::evaluation::{message_accuracy_only, EvalOptions};
use crate::imaging::{ImageTensor, LatentCode};
use crate::losses::{graph_loss, CurriculumState, LossBreakdown, NoPerceptual, PerceptualMetric, Phase, ProxyPerceptual};
use crate::message::Message;
use crate::message_codec::StegoSystem;
use crate::nn::{clip_grad_norm, collect_grads, AdamW, Graph, Tensor};
use crate::transforms::{apply_graph, TransformKind, TransformParams};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    /// Phase the step ran in.
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub batch_bit_acc: f64,
    pub ema_bit_acc: f64,
    pub transform: TransformKind,
    pub grad_norm: f64,
}

/// Probe-set metrics recorded at checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub iteration: u64,
    pub bit_acc: f64,
    pub message_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_phase: Phase,
    pub final_ema_bit_acc: f64,
    /// First iteration that ran in the given phase.
    pub iterations_to_tau1: Option<u64>,
    pub iterations_to_tau2: Option<u64>,
    pub best_probe: Option<ProbeMetrics>,
    pub final_probe: ProbeMetrics,
    pub codec_hash: String,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

/// Resolved inputs of a run, enough to replay it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub crate_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub codec_id: String,
    pub codec_hash: String,
    pub train_images: usize,
    pub probe_indices: Vec<usize>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    step: &'a StepMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    probe: Option<ProbeMetrics>,
}

/// All mutable state of a training run.
pub struct TrainRun {
    pub config: RunConfig,
    pub system: StegoSystem,
    pub curriculum: CurriculumState,
    codec_hash: String,
    opt_enc: AdamW<f32>,
    opt_dec: AdamW<f32>,
    covers: Vec<ImageTensor>,
    latents: Vec<LatentCode>,
    probe: Dataset,
    probe_indices: Vec<usize>,
    fixed_batch: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_rng: ChaCha8Rng,
    message_rng: ChaCha8Rng,
    transform_rng: ChaCha8Rng,
    metric: Box<dyn PerceptualMetric>,
    transform_params: TransformParams,
    data_draws: u64,
}

fn metric_for(kind: PerceptualKind) -> Result<Box<dyn PerceptualMetric>> {
    match kind {
        PerceptualKind::Proxy => Ok(Box::new(ProxyPerceptual)),
        PerceptualKind::None => Ok(Box::new(NoPerceptual)),
        PerceptualKind::External => Err(StegoError::Config(
            "perceptual = \"external\" needs a metric supplied through TrainRun::with_metric".into(),
        )),
    }
}

impl TrainRun {
    /// Splits off the probe set, caches the latents of the training images
    /// and initializes the networks from `config.seed`.
    pub fn new(config: RunConfig, codec: Arc<dyn LatentCodec>, data: &Dataset) -> Result<Self> {
        let metric = metric_for(config.perceptual)?;
        Self::with_metric(config, codec, data, metric)
    }

    pub fn with_metric(config: RunConfig, codec: Arc<dyn LatentCodec>, data: &Dataset, metric: Box<dyn PerceptualMetric>) -> Result<Self> {
        config.validate()?;
        if !codec.is_frozen() {
            return Err(StegoError::Config("training needs a frozen codec".into()));
        }
        let (h, w) = config.image_dims();
        if let Some(i) = data.images.iter().position(|i| i.dims() != (h, w)) {
            return Err(StegoError::invalid(format!(
                "image {} is {:?}, config expects {h}x{w}",
                data.names[i],
                data.images[i].dims()
            )));
        }
        let (train_idx, probe_idx) = probe_split(data.len(), config.probe_size, config.seed);
        if train_idx.len() < config.batch_size {
            return Err(StegoError::Config(format!(
                "{} training images is fewer than one batch of {}",
                train_idx.len(),
                config.batch_size
            )));
        }
        let covers: Vec<ImageTensor> = train_idx.iter().map(|&i| data.images[i].clone()).collect();
        let mut latents = Vec::with_capacity(covers.len());
        for chunk in covers.chunks(64) {
            latents.extend(encode_batch(codec.as_ref(), chunk)?);
        }
        let system = StegoSystem::new(
            codec.clone(),
            config.d,
            config.image_size,
            config.encoder_width,
            config.decoder_width,
            config.seed,
        )?;
        let mut opt_enc = AdamW::new(system.encoder.params(), config.learning_rate);
        let mut opt_dec = AdamW::new(system.decoder.params(), config.learning_rate);
        opt_enc.weight_decay = config.weight_decay;
        opt_dec.weight_decay = config.weight_decay;

        let mut batch_rng = seeded_rng(config.seed, streams::BATCHES);
        let mut order: Vec<usize> = (0..covers.len()).collect();
        order.shuffle(&mut batch_rng);
        let fixed_batch = order[..config.batch_size].to_vec();
        let cursor = order.len();
        Ok(Self {
            codec_hash: codec.param_hash(),
            system,
            curriculum: CurriculumState::default(),
            opt_enc,
            opt_dec,
            covers,
            latents,
            probe: data.subset(&probe_idx),
            probe_indices: probe_idx,
            fixed_batch,
            order,
            cursor,
            batch_rng,
            message_rng: seeded_rng(config.seed, streams::MESSAGES),
            transform_rng: seeded_rng(config.seed, streams::TRANSFORMS),
            transform_params: TransformParams::from(&config),
            metric,
            config,
            data_draws: 0,
        })
    }

    pub fn codec_hash(&self) -> &str {
        &self.codec_hash
    }

    pub fn probe(&self) -> &Dataset {
        &self.probe
    }

    pub fn train_len(&self) -> usize {
        self.covers.len()
    }

    /// How many batches have been drawn from the shuffled training order.
    pub fn data_draws(&self) -> u64 {
        self.data_draws
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            seed: self.config.seed,
            codec_id: self.system.codec.codec_id().to_string(),
            codec_hash: self.codec_hash.clone(),
            train_images: self.covers.len(),
            probe_indices: self.probe_indices.clone(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.curriculum.phase == Phase::FixedBatch {
            return self.fixed_batch.clone();
        }
        self.data_draws += 1;
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.batch_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer step on the next batch chosen by the curriculum.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch();
        let messages: Vec<Message> = (0..batch.len())
            .map(|_| Message::generate(self.config.d, &mut self.message_rng))
            .collect::<Result<_>>()?;
        self.step_on(&batch, &messages)
    }

    /// One optimizer step on the given training-image indices and messages.
    pub fn step_on(&mut self, batch: &[usize], messages: &[Message]) -> Result<StepMetrics> {
        let cfg = &self.config;
        let (n, d) = (batch.len(), cfg.d);
        let state = self.curriculum;
        let lse_active = state.lse_active(cfg.lse_enabled);
        let spec = state
            .transforms_active(cfg.transforms_enabled)
            .then(|| self.transform_params.sample(&mut self.transform_rng));

        let covers: Vec<ImageTensor> = batch.iter().map(|&i| self.covers[i].clone()).collect();
        let latents: Vec<LatentCode> = batch.iter().map(|&i| self.latents[i].clone()).collect();
        let signed: Vec<f64> = messages.iter().flat_map(|m| m.to_signed()).collect();
        let targets: Vec<f64> = messages.iter().flat_map(|m| m.to_f64()).collect();

        let mut g = Graph::<f32>::new();
        let pe = self.system.encoder.params().bind(&mut g, true);
        let pd = self.system.decoder.params().bind(&mut g, true);
        let cover = g.constant(ImageTensor::batch_to_tensor(&covers));
        let z = g.constant(LatentCode::batch_to_tensor(&latents));
        let sv = g.constant(Tensor::from_f64(&[n, d], &signed));
        let tv = g.constant(Tensor::from_f64(&[n, d], &targets));
        let e = self.system.encoder.forward(&mut g, &pe, sv, z);
        let ze = g.add(z, e);
        let stego = self.system.codec.decode_graph(&mut g, ze);
        let seen = match &spec {
            Some(s) => apply_graph(&mut g, stego, s)?,
            None => stego,
        };
        let logits = self.system.decoder.forward(&mut g, &pd, seen);
        let probs = g.sigmoid(logits);
        let terms = graph_loss(&mut g, cover, stego, probs, tv, &cfg.loss_weights, lse_active, Some(self.metric.as_ref()));

        let value = |v| f64::from(g.scalar_value(v));
        let loss = LossBreakdown::compose(
            &cfg.loss_weights,
            terms.perceptual.map_or(0.0, value),
            value(terms.image_mse),
            terms.lse.map(value),
            value(terms.message_mse),
        );
        if !loss.is_finite() || !value(terms.total).is_finite() {
            let dump = serde_json::to_string(&loss).unwrap_or_default();
            return Err(StegoError::Numeric(format!(
                "non-finite loss at iteration {} (phase {}): {dump}",
                state.iteration, state.phase
            )));
        }

        let lt = g.value(logits).data();
        let correct = lt
            .iter()
            .zip(&targets)
            .filter(|(&l, &t)| (l > 0.0) == (t > 0.5))
            .count();
        let batch_bit_acc = correct as f64 / (n * d) as f64;

        let mut grads = g.backward(terms.total);
        let mut ge = collect_grads(&mut grads, &pe);
        let mut gd = collect_grads(&mut grads, &pd);
        drop(g);
        let grad_norm = clip_grad_norm(&mut [&mut ge[..], &mut gd[..]], cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(StegoError::Numeric(format!(
                "non-finite gradient at iteration {}: {}",
                state.iteration,
                serde_json::to_string(&loss).unwrap_or_default()
            )));
        }
        self.opt_enc.step(self.system.encoder.params_mut(), &ge);
        self.opt_dec.step(self.system.decoder.params_mut(), &gd);

        self.curriculum = state.advance(batch_bit_acc, (&self.config).into());
        Ok(StepMetrics {
            iteration: state.iteration + 1,
            phase: state.phase,
            loss,
            batch_bit_acc,
            ema_bit_acc: self.curriculum.running_bit_acc,
            transform: spec.map_or(TransformKind::None, |s| s.kind()),
            grad_norm,
        })
    }

    /// Probe-set accuracy with a fixed message draw, comparable across
    /// checkpoints.
    pub fn probe_metrics(&self) -> Result<ProbeMetrics> {
        let opts = EvalOptions {
            n_messages: 1,
            seed: self.config.seed,
            quantize: true,
        };
        let (bit_acc, message_acc) = if self.probe.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            message_accuracy_only(&self.system, &self.probe, &opts)?
        };
        Ok(ProbeMetrics {
            iteration: self.curriculum.iteration,
            bit_acc,
            message_acc,
        })
    }

    pub fn checkpoint_meta(&self, probe: Option<ProbeMetrics>) -> serde_json::Value {
        serde_json::json!({
            "iteration": self.curriculum.iteration,
            "curriculum": self.curriculum,
            "probe": probe,
            "seed": self.config.seed,
        })
    }

    /// Runs to `config.max_iterations`, writing the log, manifest and
    /// checkpoints under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainSummary> {
        std::fs::create_dir_all(out_dir).map_err(|e| StegoError::io(out_dir, e))?;
        let manifest_path = out_dir.join(MANIFEST_FILE);
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&manifest_path, manifest).map_err(|e| StegoError::io(&manifest_path, e))?;
        let log_path = out_dir.join(LOG_FILE);
        let mut log = BufWriter::new(File::create(&log_path).map_err(|e| StegoError::io(&log_path, e))?);

        let mut to_tau1 = None;
        let mut to_tau2 = None;
        let mut best: Option<ProbeMetrics> = None;
        let mut best_path = None;
        while self.curriculum.iteration < self.config.max_iterations {
            let before = self.curriculum.phase;
            let step = match self.train_step() {
                Ok(s) => s,
                Err(e) => {
                    let _ = writeln!(log, "{}", serde_json::json!({"error": e.to_string()}));
                    let _ = log.flush();
                    return Err(e);
                }
            };
            let after = self.curriculum.phase;
            if after != before {
                info!("iteration {}: {} -> {} (ema {:.4})", step.iteration, before, after, step.ema_bit_acc);
                match after {
                    Phase::FullData => to_tau1 = Some(step.iteration),
                    Phase::RobustLse => to_tau2 = Some(step.iteration),
                    Phase::FixedBatch => {}
                }
            }
            let it = step.iteration;
            let at_checkpoint = it % self.config.checkpoint_every == 0;
            let probe = if at_checkpoint { Some(self.probe_metrics()?) } else { None };
            if it % self.config.log_every == 0 || after != before || probe.is_some() || it == 1 {
                let line = serde_json::to_string(&LogLine { step: &step, probe }).expect("log line serializes");
                writeln!(log, "{line}").map_err(|e| StegoError::io(&log_path, e))?;
            }
            if it % self.config.log_every == 0 {
                info!(
                    "iteration {it} [{}] loss {:.5} bit acc {:.4} ema {:.4}",
                    step.phase, step.loss.total, step.batch_bit_acc, step.ema_bit_acc
                );
            }
            if let Some(p) = probe {
                let path = out_dir.join(format!("ckpt_{it:07}.ckpt"));
                self.system.save(&path, self.checkpoint_meta(Some(p)))?;
                if best.is_none_or(|b| p.message_acc > b.message_acc) {
                    let bp = out_dir.join(BEST_CHECKPOINT);
                    self.system.save(&bp, self.checkpoint_meta(Some(p)))?;
                    best = Some(p);
                    best_path = Some(bp);
                }
                info!("probe at {it}: bit acc {:.4}, message acc {:.4}", p.bit_acc, p.message_acc);
            }
        }
        log.flush().map_err(|e| StegoError::io(&log_path, e))?;

        let after_hash = self.system.codec.param_hash();
        if after_hash != self.codec_hash {
            return Err(StegoError::Numeric(format!(
                "latent codec parameters changed during training ({} -> {after_hash})",
                self.codec_hash
            )));
        }
        let final_probe = self.probe_metrics()?;
        let final_path = out_dir.join(FINAL_CHECKPOINT);
        self.system.save(&final_path, self.checkpoint_meta(Some(final_probe)))?;
        if best.is_none() {
            warn!("no intermediate checkpoint was evaluated; best checkpoint is the final one");
        }
        Ok(TrainSummary {
            iterations: self.curriculum.iteration,
            final_phase: self.curriculum.phase,
            final_ema_bit_acc: self.curriculum.running_bit_acc,
            iterations_to_tau1: to_tau1,
            iterations_to_tau2: to_tau2,
            best_probe: best,
            final_probe,
            codec_hash: self.codec_hash.clone(),
            final_checkpoint: final_path,
            best_checkpoint: best_path,
        })
    }
}

/// Loads the codec and dataset named by `config` and trains into
/// `config.checkpoint_path`.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    let codec = codec_from_config(config)?;
    if !config.dataset_path.is_dir() {
        return Err(StegoError::Config(format!(
            "dataset directory {} not found",
            config.dataset_path.display()
        )));
    }
    let data = Dataset::load(&config.dataset_path, config.image_dims(), config.workers)?;
    if data.is_empty() {
        return Err(StegoError::Usage(format!("no images in {}", config.dataset_path.display())));
    }
    let mut run = TrainRun::new(config.clone(), codec, &data)?;
    run.run(&config.checkpoint_path)
}

/// Reads a JSON-lines training log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<serde_json::Value>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| StegoError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| StegoError::Parse(format!("{}: {e}", path.display()))))
        .collect()
}
