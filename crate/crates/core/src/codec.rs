//! Latent image codecs: the frozen encoder/decoder pair between images and
//! latent codes.
//!
//! Codecs are identified by a `codec_id`. Two are built in: a small
//! convolutional autoencoder trained with [`pretrain_reference_codec`], and
//! a parameter-free identity codec usable without any training. Other codecs
//! plug in through [`CodecRegistry`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::data::{probe_split, seeded_rng, streams, Dataset};
use crate::error::{Result, StegoError};
use crate::imaging::{ImageTensor, LatentCode, LATENT_CHANNELS, LATENT_FACTOR};
use crate::metrics::psnr;
use crate::nn::{clip_grad_norm, collect_grads, AdamW, Bound, Conv2d, Graph, Init, ParamStore, Real, Tensor, Var};

pub const REFERENCE_ID: &str = "reference";
pub const IDENTITY_ID: &str = "identity";

/// An image encoder/decoder pair over `N × C × H × W` graph values.
///
/// `encode_*` maps `N × 3 × H × W` to `N × 4 × H/8 × W/8` and `decode_*`
/// the reverse, with outputs in `[0, 1]`. Both must be differentiable with
/// respect to their input. Frozen codecs bind their parameters as
/// constants.
pub trait LatentCodec: Send + Sync + fmt::Debug {
    fn codec_id(&self) -> &str;

    fn is_frozen(&self) -> bool;

    /// SHA-256 over all parameters; empty-input hash for parameter-free
    /// codecs.
    fn param_hash(&self) -> String;

    fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Var;

    fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Var;

    fn encode_graph_f64(&self, g: &mut Graph<f64>, x: Var) -> Var;

    fn decode_graph_f64(&self, g: &mut Graph<f64>, z: Var) -> Var;

    /// Architecture hyperparameters as stored in checkpoints.
    fn arch(&self) -> serde_json::Value;

    /// Parameters to persist, if any.
    fn params(&self) -> Option<&ParamStore<f32>>;
}

pub fn encode(codec: &dyn LatentCodec, image: &ImageTensor) -> Result<LatentCode> {
    Ok(encode_batch(codec, std::slice::from_ref(image))?.remove(0))
}

pub fn decode(codec: &dyn LatentCodec, z: &LatentCode) -> Result<ImageTensor> {
    Ok(decode_batch(codec, std::slice::from_ref(z))?.remove(0))
}

pub fn encode_batch(codec: &dyn LatentCodec, images: &[ImageTensor]) -> Result<Vec<LatentCode>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    if images.iter().any(|i| i.dims() != first.dims()) {
        return Err(StegoError::invalid("encode batch mixes image sizes"));
    }
    let mut g = Graph::new();
    let x = g.constant(ImageTensor::batch_to_tensor(images));
    let z = codec.encode_graph(&mut g, x);
    let zt = g.value(z);
    let (_, c, h, w) = zt.dims4();
    if c != LATENT_CHANNELS || (h, w) != first.latent_dims() {
        return Err(StegoError::invalid(format!(
            "codec {} produced latent shape {:?}",
            codec.codec_id(),
            zt.shape()
        )));
    }
    (0..images.len()).map(|i| LatentCode::from_tensor(zt, i)).collect()
}

pub fn decode_batch(codec: &dyn LatentCodec, codes: &[LatentCode]) -> Result<Vec<ImageTensor>> {
    let Some(first) = codes.first() else {
        return Ok(Vec::new());
    };
    if codes.iter().any(|c| c.dims() != first.dims()) {
        return Err(StegoError::invalid("decode batch mixes latent sizes"));
    }
    let mut g = Graph::new();
    let z = g.constant(LatentCode::batch_to_tensor(codes));
    let x = codec.decode_graph(&mut g, z);
    let xt = g.value(x);
    if xt.dims4().1 != 3 || (xt.dims4().2, xt.dims4().3) != first.image_dims() {
        return Err(StegoError::invalid(format!(
            "codec {} produced image shape {:?}",
            codec.codec_id(),
            xt.shape()
        )));
    }
    (0..codes.len()).map(|i| ImageTensor::from_tensor(xt, i)).collect()
}

/// Writes a codec-only checkpoint.
pub fn save_codec(codec: &dyn LatentCodec, path: impl AsRef<Path>) -> Result<()> {
    let empty = ParamStore::new();
    let header = CheckpointHeader {
        kind: "codec".into(),
        codec_id: codec.codec_id().to_string(),
        arch: serde_json::json!({ "codec": codec.arch() }),
        d: None,
        image_size: None,
        meta: serde_json::Value::Null,
        sections: vec![],
    };
    checkpoint::save(path, header, &[("codec", codec.params().unwrap_or(&empty))])
}

// ---------------------------------------------------------------------------
// reference autoencoder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceArch {
    /// Base channel width; stages use width/2, width, width and 2·width.
    pub width: usize,
}

impl Default for ReferenceArch {
    fn default() -> Self {
        Self { width: 32 }
    }
}

#[derive(Clone, Debug)]
struct ReferenceNet {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

const SLOPE: f64 = 0.2;

impl ReferenceNet {
    fn build(arch: ReferenceArch, store: &mut ParamStore<f32>, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, streams::INIT);
        let w = arch.width.max(2);
        let h = w / 2;
        let mut conv = |name: &str, i, o, s| Conv2d::new(store, name, i, o, 3, s, Init::Default, &mut rng);
        let enc = vec![
            conv("enc0", 3, h, 1),
            conv("enc1", h, w, 2),
            conv("enc2", w, w, 2),
            conv("enc3", w, 2 * w, 2),
            conv("enc4", 2 * w, LATENT_CHANNELS, 1),
        ];
        let dec = vec![
            conv("dec0", LATENT_CHANNELS, 2 * w, 1),
            conv("dec1", 2 * w, w, 1),
            conv("dec2", w, w, 1),
            conv("dec3", w, h, 1),
            conv("dec4", h, 3, 1),
        ];
        Self { enc, dec }
    }

    fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.enc.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < self.enc.len() {
                h = g.leaky_relu(h, SLOPE);
            }
        }
        h
    }

    fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        let mut h = self.dec[0].forward(g, p, z);
        h = g.leaky_relu(h, SLOPE);
        for layer in &self.dec[1..4] {
            let (_, _, hh, ww) = g.value(h).dims4();
            h = g.upsample_nearest(h, hh * 2, ww * 2);
            h = layer.forward(g, p, h);
            h = g.leaky_relu(h, SLOPE);
        }
        h = self.dec[4].forward(g, p, h);
        let s = g.sigmoid(h);
        g.clamp(s, 0.0, 1.0)
    }
}

/// Convolutional autoencoder with three stride-2 stages and a 4-channel
/// bottleneck. Encoding is deterministic.
#[derive(Clone, Debug)]
pub struct ReferenceCodec {
    arch: ReferenceArch,
    net: ReferenceNet,
    params: ParamStore<f32>,
    frozen: bool,
}

impl ReferenceCodec {
    /// Freshly initialized, unfrozen.
    pub fn new(arch: ReferenceArch, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let net = ReferenceNet::build(arch, &mut params, seed);
        Self {
            arch,
            net,
            params,
            frozen: false,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: ReferenceArch = serde_json::from_value(ck.header.arch["codec"].clone())
            .map_err(|e| StegoError::Checkpoint(format!("reference codec arch: {e}")))?;
        let mut codec = Self::new(arch, 0);
        checkpoint::restore_into(&mut codec.params, ck.section("codec")?, "reference codec")?;
        codec.frozen = true;
        Ok(codec)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn arch_params(&self) -> ReferenceArch {
        self.arch
    }

    fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Bound {
        store.bind(g, !self.frozen)
    }
}

impl LatentCodec for ReferenceCodec {
    fn codec_id(&self) -> &str {
        REFERENCE_ID
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn param_hash(&self) -> String {
        self.params.content_hash()
    }

    fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let p = self.bind(g, &self.params);
        self.net.encode(g, &p, x)
    }

    fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Var {
        let p = self.bind(g, &self.params);
        self.net.decode(g, &p, z)
    }

    fn encode_graph_f64(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let p = self.bind(g, &self.params.cast());
        self.net.encode(g, &p, x)
    }

    fn decode_graph_f64(&self, g: &mut Graph<f64>, z: Var) -> Var {
        let p = self.bind(g, &self.params.cast());
        self.net.decode(g, &p, z)
    }

    fn arch(&self) -> serde_json::Value {
        serde_json::to_value(self.arch).expect("arch serializes")
    }

    fn params(&self) -> Option<&ParamStore<f32>> {
        Some(&self.params)
    }
}

// ---------------------------------------------------------------------------
// identity codec
// ---------------------------------------------------------------------------

/// Orthonormal columns of a 4×4 Hadamard matrix: maps RGB to 4 channels,
/// its transpose maps back exactly.
const PROJECTION: [[f64; 3]; 4] = [
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
];

/// Parameter-free codec: 8×8 average pooling followed by a fixed projection
/// to four channels; decoding projects back and upsamples by repetition.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl IdentityCodec {
    fn proj<T: Real>(transpose: bool) -> Tensor<T> {
        let v: Vec<f64> = if transpose {
            (0..3).flat_map(|c| (0..4).map(move |k| PROJECTION[k][c])).collect()
        } else {
            PROJECTION.iter().flatten().copied().collect()
        };
        let shape = if transpose { [3, 4, 1, 1] } else { [4, 3, 1, 1] };
        Tensor::from_f64(&shape, &v)
    }

    fn encode<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
        let pooled = g.avg_pool(x, LATENT_FACTOR);
        let w = g.constant(Self::proj(false));
        g.conv2d(pooled, w, None, 1, 0)
    }

    fn decode<T: Real>(g: &mut Graph<T>, z: Var) -> Var {
        let w = g.constant(Self::proj(true));
        let rgb = g.conv2d(z, w, None, 1, 0);
        let (_, _, h, wd) = g.value(rgb).dims4();
        let up = g.upsample_nearest(rgb, h * LATENT_FACTOR, wd * LATENT_FACTOR);
        g.clamp(up, 0.0, 1.0)
    }
}

impl LatentCodec for IdentityCodec {
    fn codec_id(&self) -> &str {
        IDENTITY_ID
    }

    fn is_frozen(&self) -> bool {
        true
    }

    fn param_hash(&self) -> String {
        ParamStore::<f32>::new().content_hash()
    }

    fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Var {
        Self::encode(g, x)
    }

    fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Var {
        Self::decode(g, z)
    }

    fn encode_graph_f64(&self, g: &mut Graph<f64>, x: Var) -> Var {
        Self::encode(g, x)
    }

    fn decode_graph_f64(&self, g: &mut Graph<f64>, z: Var) -> Var {
        Self::decode(g, z)
    }

    fn arch(&self) -> serde_json::Value {
        serde_json::json!({})
    }

    fn params(&self) -> Option<&ParamStore<f32>> {
        None
    }
}

// ---------------------------------------------------------------------------
// registry
// ---------------------------------------------------------------------------

pub type CodecLoader = fn(&Checkpoint) -> Result<Arc<dyn LatentCodec>>;

/// Maps `codec_id` to a loader that rebuilds the codec from a checkpoint.
#[derive(Clone)]
pub struct CodecRegistry {
    loaders: BTreeMap<String, CodecLoader>,
}

impl Default for CodecRegistry {
    fn default() -> Self {
        let mut r = Self {
            loaders: BTreeMap::new(),
        };
        r.register(REFERENCE_ID, |ck| Ok(Arc::new(ReferenceCodec::from_checkpoint(ck)?)));
        r.register(IDENTITY_ID, |_| Ok(Arc::new(IdentityCodec)));
        r
    }
}

impl CodecRegistry {
    pub fn register(&mut self, codec_id: &str, loader: CodecLoader) {
        self.loaders.insert(codec_id.to_string(), loader);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.loaders.keys().map(String::as_str)
    }

    pub fn from_checkpoint(&self, ck: &Checkpoint) -> Result<Arc<dyn LatentCodec>> {
        let loader = self
            .loaders
            .get(&ck.header.codec_id)
            .ok_or_else(|| StegoError::Checkpoint(format!("unknown codec id {:?}", ck.header.codec_id)))?;
        loader(ck)
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<Arc<dyn LatentCodec>> {
        self.from_checkpoint(&checkpoint::load(path)?)
    }
}

/// The codec a run config asks for. The identity codec needs no file; any
/// other id is loaded from `codec_path`, and a missing file is a config
/// error.
pub fn codec_from_config(cfg: &RunConfig) -> Result<Arc<dyn LatentCodec>> {
    if cfg.codec_id == IDENTITY_ID {
        return Ok(Arc::new(IdentityCodec));
    }
    if !cfg.codec_path.is_file() {
        return Err(StegoError::Config(format!(
            "codec checkpoint {} not found; run pretrain-codec first",
            cfg.codec_path.display()
        )));
    }
    let codec = CodecRegistry::default().load(&cfg.codec_path)?;
    if codec.codec_id() != cfg.codec_id {
        return Err(StegoError::Config(format!(
            "codec checkpoint holds {:?} but codec_id is {:?}",
            codec.codec_id(),
            cfg.codec_id
        )));
    }
    Ok(codec)
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub iterations: u64,
    pub train_images: usize,
    pub heldout_images: usize,
    pub final_train_mse: f64,
    pub heldout_psnr: f64,
}

/// Mean reconstruction PSNR over `images`.
pub fn reconstruction_psnr(codec: &dyn LatentCodec, images: &[ImageTensor]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(32) {
        let z = encode_batch(codec, chunk)?;
        let rec = decode_batch(codec, &z)?;
        for (a, b) in chunk.iter().zip(&rec) {
            total += psnr(a, b)?;
        }
    }
    Ok(total / images.len().max(1) as f64)
}

/// Trains a [`ReferenceCodec`] on every image of `dataset_path` (resized to
/// the configured size), saves it frozen to `config.codec_path` and returns
/// it. A seeded 5% of the images is held out to measure reconstruction.
pub fn pretrain_reference_codec(
    dataset_path: impl AsRef<Path>,
    config: &RunConfig,
) -> Result<(ReferenceCodec, PretrainReport)> {
    let data = Dataset::load(dataset_path.as_ref(), config.image_dims(), config.workers)?;
    if data.len() < config.codec_min_images {
        return Err(StegoError::Config(format!(
            "codec pretraining needs at least {} images, found {} in {}",
            config.codec_min_images,
            data.len(),
            dataset_path.as_ref().display()
        )));
    }
    let (codec, report) = pretrain_on_images(&data.images, config)?;
    save_codec(&codec, &config.codec_path)?;
    Ok((codec, report))
}

/// In-memory form of [`pretrain_reference_codec`]; does not save.
pub fn pretrain_on_images(images: &[ImageTensor], config: &RunConfig) -> Result<(ReferenceCodec, PretrainReport)> {
    if images.is_empty() {
        return Err(StegoError::Config("no images to pretrain on".into()));
    }
    let heldout_n = (images.len() / 20).max(1).min(images.len() - 1);
    let (train_idx, held_idx) = probe_split(images.len(), heldout_n, config.seed);
    let mut codec = ReferenceCodec::new(ReferenceArch { width: config.codec_width }, config.seed);
    let mut opt = AdamW::new(&codec.params, config.codec_learning_rate);
    opt.weight_decay = 0.0;
    let mut rng = seeded_rng(config.seed, streams::BATCHES);
    let mut order = train_idx.clone();
    let mut cursor = order.len();
    let steps = config.codec_iterations;
    let mut last_mse = f64::NAN;
    let mut running = 0.0;
    for step in 0..steps {
        // cosine decay to a tenth of the base rate
        let progress = step as f64 / steps.max(1) as f64;
        opt.lr = config.codec_learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut batch = Vec::with_capacity(config.codec_batch_size);
        while batch.len() < config.codec_batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let mut g = Graph::new();
        let p = codec.params.bind(&mut g, true);
        let x = g.constant(ImageTensor::batch_to_tensor(&batch));
        let z = codec.net.encode(&mut g, &p, x);
        let rec = codec.net.decode(&mut g, &p, z);
        let diff = g.sub(rec, x);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        last_mse = f64::from(g.scalar_value(loss));
        if !last_mse.is_finite() {
            return Err(StegoError::Numeric(format!("codec loss diverged at step {step}")));
        }
        running = if step == 0 { last_mse } else { 0.98 * running + 0.02 * last_mse };
        let mut grads = g.backward(loss);
        let mut slots = collect_grads(&mut grads, &p);
        clip_grad_norm(&mut [&mut slots[..]], 1.0);
        opt.step(&mut codec.params, &slots);
        if (step + 1) % 500 == 0 {
            info!(
                "codec step {}/{}: mse {:.6} (~{:.2} dB)",
                step + 1,
                steps,
                running,
                10.0 * (1.0 / running).log10()
            );
        }
    }
    let codec = codec.freeze();
    let held: Vec<ImageTensor> = held_idx.iter().map(|&i| images[i].clone()).collect();
    let heldout_psnr = reconstruction_psnr(&codec, &held)?;
    info!("codec held-out psnr {heldout_psnr:.2} dB on {} images", held.len());
    Ok((
        codec,
        PretrainReport {
            iterations: steps,
            train_images: train_idx.len(),
            heldout_images: held.len(),
            final_train_mse: last_mse,
            heldout_psnr,
        },
    ))
}
