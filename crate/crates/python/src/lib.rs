//! Python bindings: a trained or untrained steganography model, message
//! helpers, metrics and the training entry point.
//!
//! Images cross the boundary as flat row-major `H × W × 3` lists of floats
//! in `[0, 1]`; messages as lists of 0/1 integers.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stego_core::codec::{IdentityCodec, LatentCodec, ReferenceArch, ReferenceCodec};
use stego_core::config::RunConfig;
use stego_core::data::seeded_rng;
use stego_core::imaging::{load_image, save_image, ImageTensor};
use stego_core::message::Message;
use stego_core::message_codec::StegoSystem;
use stego_core::{losses, metrics, StegoError};

fn to_py(e: StegoError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn message(bits: Vec<u8>) -> PyResult<Message> {
    Message::new(bits).map_err(to_py)
}

fn image(data: Vec<f32>, height: usize, width: usize) -> PyResult<ImageTensor> {
    ImageTensor::new(height, width, data).map_err(to_py)
}

/// Message encoder, decoder and frozen latent codec.
#[pyclass(name = "StegoModel")]
struct PyStegoModel {
    inner: StegoSystem,
}

#[pymethods]
impl PyStegoModel {
    /// A freshly initialized model. `codec` is `"identity"` or `"reference"`
    /// (an untrained reference codec).
    #[staticmethod]
    #[pyo3(signature = (d, height, width, seed=0, codec="identity", encoder_width=16, decoder_width=32))]
    fn untrained(d: usize, height: usize, width: usize, seed: u64, codec: &str, encoder_width: usize, decoder_width: usize) -> PyResult<Self> {
        let codec: Arc<dyn LatentCodec> = match codec {
            "identity" => Arc::new(IdentityCodec),
            "reference" => Arc::new(ReferenceCodec::new(ReferenceArch::default(), seed).freeze()),
            other => return Err(PyValueError::new_err(format!("unknown codec {other:?}"))),
        };
        let inner = StegoSystem::new(codec, d, [height, width], encoder_width, decoder_width, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: StegoSystem::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path, serde_json::Value::Null).map_err(to_py)
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    /// `(height, width)`.
    #[getter]
    fn image_size(&self) -> (usize, usize) {
        let [h, w] = self.inner.image_size();
        (h, w)
    }

    #[getter]
    fn codec_id(&self) -> String {
        self.inner.codec.codec_id().to_string()
    }

    /// Stego image for `bits` hidden in `cover`.
    fn embed(&self, cover: Vec<f32>, bits: Vec<u8>) -> PyResult<Vec<f32>> {
        let (h, w) = self.image_size();
        let stego = self.inner.embed_image(&image(cover, h, w)?, &message(bits)?).map_err(to_py)?;
        Ok(stego.data().to_vec())
    }

    /// `(bits, logits)` read from `img`.
    fn extract(&self, img: Vec<f32>) -> PyResult<(Vec<u8>, Vec<f64>)> {
        let (h, w) = self.image_size();
        let (logits, m) = self.inner.extract(&image(img, h, w)?).map_err(to_py)?;
        Ok((m.bits().to_vec(), logits))
    }

    /// Embeds a hex message into an image file and writes the stego file.
    fn embed_file(&self, cover_path: &str, hex: &str, out_path: &str) -> PyResult<()> {
        let m = stego_core::harness::parse_message(hex, self.inner.d()).map_err(to_py)?;
        let [h, w] = self.inner.image_size();
        let cover = load_image(cover_path, (h, w)).map_err(to_py)?;
        let stego = self.inner.embed_image(&cover, &m).map_err(to_py)?;
        save_image(&stego, out_path).map_err(to_py)
    }

    /// Hex message read from an image file.
    fn extract_file(&self, path: &str) -> PyResult<String> {
        let [h, w] = self.inner.image_size();
        let img = load_image(path, (h, w)).map_err(to_py)?;
        Ok(self.inner.extract(&img).map_err(to_py)?.1.to_hex())
    }
}

#[pyfunction]
fn random_message(d: usize, seed: u64) -> PyResult<Vec<u8>> {
    Ok(Message::generate(d, &mut seeded_rng(seed, 0)).map_err(to_py)?.bits().to_vec())
}

#[pyfunction]
fn message_to_hex(bits: Vec<u8>) -> PyResult<String> {
    Ok(message(bits)?.to_hex())
}

#[pyfunction]
fn message_from_hex(hex: &str, d: usize) -> PyResult<Vec<u8>> {
    Ok(Message::from_hex(hex, d).map_err(to_py)?.bits().to_vec())
}

#[pyfunction]
fn bit_accuracy(a: Vec<u8>, b: Vec<u8>) -> PyResult<f64> {
    metrics::bit_accuracy(&message(a)?, &message(b)?).map_err(to_py)
}

#[pyfunction]
fn message_accuracy(a: Vec<u8>, b: Vec<u8>) -> PyResult<u8> {
    metrics::message_accuracy(&message(a)?, &message(b)?).map_err(to_py)
}

/// Log-sum-exp of squared per-bit errors between predicted bit
/// probabilities and the target bits.
#[pyfunction]
fn lse_loss(pred: Vec<f64>, bits: Vec<u8>) -> PyResult<f64> {
    losses::lse_loss(&pred, &message(bits)?).map_err(to_py)
}

#[pyfunction]
fn psnr(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize) -> PyResult<f64> {
    metrics::psnr(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize) -> PyResult<f64> {
    metrics::ssim(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

/// Writes `count` procedural images of `height × width` into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, count, height=32, width=32, seed=0))]
fn generate_data(out_dir: &str, count: usize, height: usize, width: usize, seed: u64) -> PyResult<()> {
    stego_core::data::write_procedural_dataset(out_dir, count, (height, width), seed).map_err(to_py)
}

/// Trains from a TOML config string and returns the run summary as JSON.
#[pyfunction]
fn train(py: Python<'_>, config_toml: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(to_py)?;
    let summary = py.detach(|| stego_core::trainer::train(&cfg)).map_err(to_py)?;
    Ok(serde_json::to_string(&summary).expect("summary serializes"))
}

#[pymodule]
fn stego_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStegoModel>()?;
    m.add_function(wrap_pyfunction!(random_message, m)?)?;
    m.add_function(wrap_pyfunction!(message_to_hex, m)?)?;
    m.add_function(wrap_pyfunction!(message_from_hex, m)?)?;
    m.add_function(wrap_pyfunction!(bit_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(message_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(lse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
