//! The trainable pair: a message encoder that turns a message and a latent
//! code into an additive latent perturbation, and a message decoder that
//! reads the bits back from pixels.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::codec::{CodecRegistry, LatentCodec};
use crate::data::{seeded_rng, streams};
use crate::error::{Result, StegoError};
use crate::imaging::{ImageTensor, LatentCode, LATENT_CHANNELS};
use crate::message::Message;
use crate::nn::{Bound, Conv2d, Graph, Init, Linear, ParamStore, Real, Tensor, Var};

const SLOPE: f64 = 0.2;
const UNET_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub d: usize,
    /// Latent grid (height, width).
    pub latent: [usize; 2],
    /// Channels of the first level; deeper levels use 2× and 4×.
    pub width: usize,
}

/// Latent-aware message encoder.
///
/// A linear layer lifts the ±1 message to one latent-sized plane, which is
/// concatenated with the latent code and passed through a UNet with four
/// downsampling and four upsampling stages. Downsampling stops once a side
/// reaches 1. The last convolution starts at zero so a fresh encoder emits
/// `e = 0`.
#[derive(Clone, Debug)]
pub struct MessageEncoder {
    arch: EncoderArch,
    params: ParamStore<f32>,
    lift: Linear,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

impl MessageEncoder {
    pub fn new(arch: EncoderArch, seed: u64) -> Result<Self> {
        if arch.d == 0 || arch.latent.contains(&0) || arch.width == 0 {
            return Err(StegoError::invalid(format!("invalid encoder architecture {arch:?}")));
        }
        let mut rng = seeded_rng(seed, streams::INIT + 10);
        let mut params = ParamStore::new();
        let [lh, lw] = arch.latent;
        let w = arch.width;
        let lift = Linear::new(&mut params, "lift", arch.d, lh * lw, &mut rng);
        let widths = [w, 2 * w, 4 * w, 4 * w, 4 * w];
        let mut down = vec![Conv2d::new(&mut params, "down0", LATENT_CHANNELS + 1, widths[0], 3, 1, Init::Default, &mut rng)];
        let (mut h, mut wd) = (lh, lw);
        for i in 1..=UNET_DEPTH {
            let stride = if h.min(wd) >= 2 { 2 } else { 1 };
            if stride == 2 {
                h = h.div_ceil(2);
                wd = wd.div_ceil(2);
            }
            down.push(Conv2d::new(&mut params, &format!("down{i}"), widths[i - 1], widths[i], 3, stride, Init::Default, &mut rng));
        }
        let up_out = [4 * w, 2 * w, w, w];
        let mut up = Vec::new();
        let mut cur = widths[UNET_DEPTH];
        for (i, &out) in up_out.iter().enumerate() {
            let skip = widths[UNET_DEPTH - 1 - i];
            up.push(Conv2d::new(&mut params, &format!("up{i}"), cur + skip, out, 3, 1, Init::Default, &mut rng));
            cur = out;
        }
        let head = Conv2d::new(&mut params, "head", cur, LATENT_CHANNELS, 3, 1, Init::Zero, &mut rng);
        Ok(Self {
            arch,
            params,
            lift,
            down,
            up,
            head,
        })
    }

    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn d(&self) -> usize {
        self.arch.d
    }

    /// Sets the output convolution to zero, making the encoder emit `e = 0`.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// `signed` is `N × d` with entries ±1, `z` is `N × 4 × h × w`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, signed: Var, z: Var) -> Var {
        let (n, _, h, w) = g.value(z).dims4();
        let lifted = self.lift.forward(g, p, signed);
        let plane = g.reshape(lifted, &[n, 1, h, w]);
        let mut x = g.concat_channels(&[plane, z]);
        let mut skips = Vec::with_capacity(UNET_DEPTH);
        for layer in &self.down {
            x = layer.forward(g, p, x);
            x = g.leaky_relu(x, SLOPE);
            skips.push(x);
        }
        skips.pop();
        for layer in &self.up {
            let skip = skips.pop().expect("one skip per up stage");
            let (_, _, sh, sw) = g.value(skip).dims4();
            let upx = g.upsample_nearest(x, sh, sw);
            let cat = g.concat_channels(&[upx, skip]);
            x = layer.forward(g, p, cat);
            x = g.leaky_relu(x, SLOPE);
        }
        self.head.forward(g, p, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub d: usize,
    pub image_size: [usize; 2],
    /// Channels of the first block; later blocks use 2× and 4×.
    pub width: usize,
}

/// Convolutional bit classifier: five conv blocks, global average pooling
/// and a linear head with one logit per bit.
#[derive(Clone, Debug)]
pub struct MessageDecoder {
    arch: DecoderArch,
    params: ParamStore<f32>,
    blocks: Vec<Conv2d>,
    head: Linear,
}

impl MessageDecoder {
    pub fn new(arch: DecoderArch, seed: u64) -> Result<Self> {
        if arch.d == 0 || arch.width == 0 {
            return Err(StegoError::invalid(format!("invalid decoder architecture {arch:?}")));
        }
        crate::imaging::check_image_dims(arch.image_size[0], arch.image_size[1])?;
        let mut rng = seeded_rng(seed, streams::INIT + 20);
        let mut params = ParamStore::new();
        let w = arch.width;
        let spec = [(3, w, 1), (w, w, 2), (w, 2 * w, 2), (2 * w, 2 * w, 2), (2 * w, 4 * w, 1)];
        let blocks = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv2d::new(&mut params, &format!("block{i}"), ci, co, 3, s, Init::Default, &mut rng))
            .collect();
        let head = Linear::new(&mut params, "head", 4 * w, arch.d, &mut rng);
        Ok(Self {
            arch,
            params,
            blocks,
            head,
        })
    }

    pub fn arch(&self) -> DecoderArch {
        self.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn d(&self) -> usize {
        self.arch.d
    }

    /// `x` is `N × 3 × H × W` in `[0, 1]`; returns `N × d` logits.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let centred = g.scale(x, 2.0);
        let mut h = g.add_scalar(centred, -1.0);
        for block in &self.blocks {
            h = block.forward(g, p, h);
            h = g.leaky_relu(h, SLOPE);
        }
        let pooled = g.global_avg_pool(h);
        self.head.forward(g, p, pooled)
    }
}

fn check_message(m: &Message, d: usize) -> Result<()> {
    if m.len() != d {
        return Err(StegoError::invalid(format!("message has {} bits, model expects {d}", m.len())));
    }
    Ok(())
}

/// The latent perturbation `e` for message `m` on latent `z`.
pub fn encode_message(enc: &MessageEncoder, m: &Message, z: &LatentCode) -> Result<LatentCode> {
    check_message(m, enc.d())?;
    if z.dims() != (enc.arch.latent[0], enc.arch.latent[1]) {
        return Err(StegoError::invalid(format!(
            "latent {:?} does not match encoder grid {:?}",
            z.dims(),
            enc.arch.latent
        )));
    }
    let mut g = Graph::new();
    let p = enc.params.bind(&mut g, false);
    let signed = g.constant(Tensor::from_f64(&[1, m.len()], &m.to_signed()));
    let zv = g.constant(z.to_tensor());
    let e = enc.forward(&mut g, &p, signed, zv);
    LatentCode::from_tensor(g.value(e), 0)
}

/// Stego image `decode(z + e)`.
pub fn embed(enc: &MessageEncoder, codec: &dyn LatentCodec, m: &Message, z: &LatentCode) -> Result<ImageTensor> {
    let e = encode_message(enc, m, z)?;
    crate::codec::decode(codec, &z.add(&e)?)
}

/// Per-bit logits and the thresholded message.
pub fn extract(dec: &MessageDecoder, image: &ImageTensor) -> Result<(Vec<f64>, Message)> {
    let [h, w] = dec.arch.image_size;
    if image.dims() != (h, w) {
        return Err(StegoError::invalid(format!(
            "image is {:?}, decoder expects {h}x{w}",
            image.dims()
        )));
    }
    let logits = extract_batch(dec, std::slice::from_ref(image))?.remove(0);
    let m = Message::from_logits(&logits)?;
    Ok((logits, m))
}

/// Logits for a batch of equally sized images.
pub fn extract_batch(dec: &MessageDecoder, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::<f32>::new();
    let p = dec.params.bind(&mut g, false);
    let x = g.constant(ImageTensor::batch_to_tensor(images));
    let logits = dec.forward(&mut g, &p, x);
    let t = g.value(logits);
    if !t.all_finite() {
        return Err(StegoError::Numeric("non-finite decoder output".into()));
    }
    Ok(t.data().chunks(dec.d()).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect())
}

/// A frozen codec with a message encoder and decoder, the unit that is
/// trained, checkpointed and evaluated.
#[derive(Clone, Debug)]
pub struct StegoSystem {
    pub codec: Arc<dyn LatentCodec>,
    pub encoder: MessageEncoder,
    pub decoder: MessageDecoder,
}

impl StegoSystem {
    pub fn new(codec: Arc<dyn LatentCodec>, d: usize, image_size: [usize; 2], encoder_width: usize, decoder_width: usize, seed: u64) -> Result<Self> {
        crate::imaging::check_image_dims(image_size[0], image_size[1])?;
        let latent = [image_size[0] / 8, image_size[1] / 8];
        Ok(Self {
            codec,
            encoder: MessageEncoder::new(EncoderArch { d, latent, width: encoder_width }, seed)?,
            decoder: MessageDecoder::new(DecoderArch { d, image_size, width: decoder_width }, seed)?,
        })
    }

    pub fn d(&self) -> usize {
        self.encoder.d()
    }

    pub fn image_size(&self) -> [usize; 2] {
        self.decoder.arch.image_size
    }

    /// Cover image to stego image.
    pub fn embed_image(&self, cover: &ImageTensor, m: &Message) -> Result<ImageTensor> {
        let z = crate::codec::encode(self.codec.as_ref(), cover)?;
        embed(&self.encoder, self.codec.as_ref(), m, &z)
    }

    pub fn extract(&self, image: &ImageTensor) -> Result<(Vec<f64>, Message)> {
        extract(&self.decoder, image)
    }

    /// Embeds `messages[i]` into `covers[i]` in one batched pass.
    pub fn embed_batch(&self, covers: &[ImageTensor], messages: &[Message]) -> Result<Vec<ImageTensor>> {
        if covers.len() != messages.len() {
            return Err(StegoError::invalid("one message per cover is required"));
        }
        if covers.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.d();
        for m in messages {
            check_message(m, d)?;
        }
        let [h, w] = self.image_size();
        if let Some(c) = covers.iter().find(|c| c.dims() != (h, w)) {
            return Err(StegoError::invalid(format!("cover is {:?}, model expects {h}x{w}", c.dims())));
        }
        let z = crate::codec::encode_batch(self.codec.as_ref(), covers)?;
        let mut g = Graph::<f32>::new();
        let p = self.encoder.params.bind(&mut g, false);
        let signed: Vec<f64> = messages.iter().flat_map(|m| m.to_signed()).collect();
        let sv = g.constant(Tensor::from_f64(&[covers.len(), d], &signed));
        let zv = g.constant(LatentCode::batch_to_tensor(&z));
        let e = self.encoder.forward(&mut g, &p, sv, zv);
        let ze = g.add(zv, e);
        let x = self.codec.decode_graph(&mut g, ze);
        if !g.value(x).all_finite() {
            return Err(StegoError::Numeric("non-finite stego image".into()));
        }
        (0..covers.len()).map(|i| ImageTensor::from_tensor(g.value(x), i)).collect()
    }

    pub fn extract_batch(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let [h, w] = self.image_size();
        if let Some(i) = images.iter().find(|i| i.dims() != (h, w)) {
            return Err(StegoError::invalid(format!("image is {:?}, decoder expects {h}x{w}", i.dims())));
        }
        extract_batch(&self.decoder, images)
    }

    pub fn header(&self, meta: serde_json::Value) -> CheckpointHeader {
        CheckpointHeader {
            kind: "system".into(),
            codec_id: self.codec.codec_id().to_string(),
            arch: serde_json::json!({
                "codec": self.codec.arch(),
                "encoder": self.encoder.arch,
                "decoder": self.decoder.arch,
            }),
            d: Some(self.d()),
            image_size: Some(self.image_size()),
            meta,
            sections: vec![],
        }
    }

    pub fn to_bytes(&self, meta: serde_json::Value) -> Vec<u8> {
        let empty = ParamStore::new();
        checkpoint::to_bytes(
            self.header(meta),
            &[
                ("codec", self.codec.params().unwrap_or(&empty)),
                ("encoder", &self.encoder.params),
                ("decoder", &self.decoder.params),
            ],
        )
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let empty = ParamStore::new();
        checkpoint::save(
            path,
            self.header(meta),
            &[
                ("codec", self.codec.params().unwrap_or(&empty)),
                ("encoder", &self.encoder.params),
                ("decoder", &self.decoder.params),
            ],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint, registry: &CodecRegistry) -> Result<Self> {
        if ck.header.kind != "system" {
            return Err(StegoError::Checkpoint(format!(
                "expected a system checkpoint, found kind {:?}",
                ck.header.kind
            )));
        }
        let codec = registry.from_checkpoint(ck)?;
        let parse = |key: &str| ck.header.arch.get(key).cloned().ok_or_else(|| StegoError::Checkpoint(format!("missing {key} architecture")));
        let ea: EncoderArch = serde_json::from_value(parse("encoder")?).map_err(|e| StegoError::Checkpoint(e.to_string()))?;
        let da: DecoderArch = serde_json::from_value(parse("decoder")?).map_err(|e| StegoError::Checkpoint(e.to_string()))?;
        if ck.header.d != Some(ea.d) || ea.d != da.d {
            return Err(StegoError::Checkpoint("inconsistent message length in checkpoint".into()));
        }
        let mut encoder = MessageEncoder::new(ea, 0)?;
        let mut decoder = MessageDecoder::new(da, 0)?;
        checkpoint::restore_into(&mut encoder.params, ck.section("encoder")?, "message encoder")?;
        checkpoint::restore_into(&mut decoder.params, ck.section("decoder")?, "message decoder")?;
        Ok(Self { codec, encoder, decoder })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?, &CodecRegistry::default())
    }

    /// Loads and checks the message length against `expected_d`.
    pub fn load_for(path: impl AsRef<Path>, expected_d: usize) -> Result<Self> {
        let sys = Self::load(path)?;
        if sys.d() != expected_d {
            return Err(StegoError::Checkpoint(format!(
                "checkpoint message length {} does not match configured {expected_d}",
                sys.d()
            )));
        }
        Ok(sys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{IdentityCodec, ReferenceArch, ReferenceCodec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn system(d: usize, size: [usize; 2]) -> StegoSystem {
        let codec = Arc::new(ReferenceCodec::new(ReferenceArch { width: 8 }, 1).freeze());
        StegoSystem::new(codec, d, size, 8, 8, 2).unwrap()
    }

    #[test]
    fn shapes_and_zero_init_identity() {
        let sys = system(16, [32, 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cover = ImageTensor::from_fn(32, 32, |_, _, _| rng.random()).unwrap();
        let z = crate::codec::encode(sys.codec.as_ref(), &cover).unwrap();
        for _ in 0..3 {
            let m = Message::generate(16, &mut rng).unwrap();
            let e = encode_message(&sys.encoder, &m, &z).unwrap();
            assert_eq!(e.dims(), z.dims());
            assert!(e.data().iter().all(|&v| v == 0.0));
            let stego = embed(&sys.encoder, sys.codec.as_ref(), &m, &z).unwrap();
            assert_eq!(stego, crate::codec::decode(sys.codec.as_ref(), &z).unwrap());
        }
        let (logits, m) = sys.extract(&ImageTensor::filled(32, 32, 0.0).unwrap()).unwrap();
        assert_eq!(logits.len(), 16);
        assert_eq!(m.len(), 16);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unet_handles_tiny_and_rectangular_grids() {
        for latent in [[1, 1], [2, 1], [4, 4], [8, 4], [3, 5]] {
            let mut enc = MessageEncoder::new(EncoderArch { d: 5, latent, width: 4 }, 0).unwrap();
            // nonzero head so the output depends on every stage
            for v in enc.params_mut().tensors_mut() {
                v.data_mut().iter_mut().for_each(|x| *x += 0.01);
            }
            let z = LatentCode::zeros(latent[0], latent[1]).unwrap();
            let m = Message::new(vec![1, 0, 1, 1, 0]).unwrap();
            let e = encode_message(&enc, &m, &z).unwrap();
            assert_eq!(e.dims(), (latent[0], latent[1]));
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let sys = system(8, [16, 16]);
        let z = LatentCode::zeros(2, 2).unwrap();
        let wrong = Message::new(vec![1; 9]).unwrap();
        assert!(matches!(encode_message(&sys.encoder, &wrong, &z), Err(StegoError::InvalidArgument(_))));
        assert!(encode_message(&sys.encoder, &Message::new(vec![1; 8]).unwrap(), &LatentCode::zeros(4, 4).unwrap()).is_err());
        assert!(sys.extract(&ImageTensor::filled(32, 32, 0.5).unwrap()).is_err());
    }

    #[test]
    fn system_checkpoint_round_trip() {
        let mut sys = system(8, [16, 16]);
        sys.encoder.params_mut().tensors_mut()[0].data_mut()[0] = 0.123;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.ckpt");
        sys.save(&path, serde_json::json!({"iteration": 3})).unwrap();
        let back = StegoSystem::load(&path).unwrap();
        assert_eq!(back.encoder.params(), sys.encoder.params());
        assert_eq!(back.decoder.params(), sys.decoder.params());
        assert_eq!(back.codec.param_hash(), sys.codec.param_hash());
        assert!(StegoSystem::load_for(&path, 16).is_err());

        let ident = StegoSystem::new(Arc::new(IdentityCodec), 4, [8, 8], 4, 4, 0).unwrap();
        let p2 = dir.path().join("ident.ckpt");
        ident.save(&p2, serde_json::Value::Null).unwrap();
        assert_eq!(StegoSystem::load(&p2).unwrap().codec.codec_id(), "identity");
    }
    fn pipeline_loss(enc: &MessageEncoder, ep: &ParamStore<f64>, dec: &MessageDecoder, dp: &ParamStore<f64>, cover: &ImageTensor, m: &Message) -> (f64, Vec<Tensor<f64>>) {
        let codec = IdentityCodec;
        let mut g = Graph::<f64>::new();
        let eb = ep.bind(&mut g, true);
        let db = dp.bind(&mut g, true);
        let x = g.constant(cover.to_tensor());
        let z = codec.encode_graph_f64(&mut g, x);
        let signed = g.constant(Tensor::from_f64(&[1, m.len()], &m.to_signed()));
        let e = enc.forward(&mut g, &eb, signed, z);
        let ze = g.add(z, e);
        let stego = codec.decode_graph_f64(&mut g, ze);
        let logits = dec.forward(&mut g, &db, stego);
        let probs = g.sigmoid(logits);
        let target = g.constant(Tensor::from_f64(&[1, m.len()], &m.to_f64()));
        let dm = g.sub(probs, target);
        let sq = g.square(dm);
        let msg = g.mean_all(sq);
        let rows = g.logsumexp_rows(sq);
        let lse = g.mean_all(rows);
        let di = g.sub(stego, x);
        let sqi = g.square(di);
        let img = g.mean_all(sqi);
        let perc = crate::losses::proxy_graph(&mut g, x, stego);
        let parts = [(perc, 1.0), (img, 1.5), (lse, 0.1), (msg, 16.0)];
        let mut total = g.scale(parts[0].0, parts[0].1);
        for &(v, w) in &parts[1..] {
            let t = g.scale(v, w);
            total = g.add(total, t);
        }
        let grads = g.backward(total);
        let all = eb.vars().iter().chain(db.vars()).map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect();
        (g.scalar_value(total), all)
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut enc = MessageEncoder::new(EncoderArch { d: 4, latent: [1, 1], width: 2 }, 3).unwrap();
        let dec = MessageDecoder::new(DecoderArch { d: 4, image_size: [8, 8], width: 2 }, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in enc.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let cover = ImageTensor::from_fn(8, 8, |_, _, _| rng.random_range(0.2..0.8)).unwrap();
        let m = Message::new(vec![1, 0, 0, 1]).unwrap();
        let ep = enc.params().cast::<f64>();
        let dp = dec.params().cast::<f64>();
        let (_, analytic) = pipeline_loss(&enc, &ep, &dec, &dp, &cover, &m);
        let n_enc = ep.len();
        let h = 1e-6;
        let mut checked = 0;
        for (k, grad) in analytic.iter().enumerate() {
            for j in 0..grad.numel().min(6) {
                let perturbed = |delta: f64| {
                    let (mut e2, mut d2) = (ep.clone(), dp.clone());
                    let t = if k < n_enc { &mut e2.tensors_mut()[k] } else { &mut d2.tensors_mut()[k - n_enc] };
                    t.data_mut()[j] += delta;
                    pipeline_loss(&enc, &e2, &dec, &d2, &cover, &m).0
                };
                let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let an = grad.data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
                assert!(err < 1e-3, "param {k} coord {j}: analytic {an} fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
