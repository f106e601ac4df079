//! Fixed-length binary messages and their hex serialization.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StegoError};

/// A secret of `d` bits, each exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(StegoError::invalid("message length must be at least 1"));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(StegoError::invalid(format!(
                "message element {pos} is {}, expected 0 or 1",
                bits[pos]
            )));
        }
        Ok(Self { bits })
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        Self::new(bits.iter().map(|&b| u8::from(b)).collect())
    }

    /// Draws `d` independent uniform bits.
    pub fn generate(d: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 {
            return Err(StegoError::invalid("message length must be at least 1"));
        }
        Ok(Self {
            bits: (0..d).map(|_| u8::from(rng.random::<bool>())).collect(),
        })
    }

    /// Bit `i` is set when `logits[i] > 0`; a logit of exactly zero decodes
    /// to 0.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|v| v.is_nan()) {
            return Err(StegoError::Numeric("NaN logit".into()));
        }
        Self::new(logits.iter().map(|&v| u8::from(v > 0.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Bits as ±1, the encoder's input embedding.
    pub fn to_signed(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }

    /// Number of differing positions.
    pub fn hamming(&self, other: &Message) -> Result<usize> {
        if self.len() != other.len() {
            return Err(StegoError::invalid(format!(
                "message lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count())
    }

    /// MSB-first hex, zero-padded on the right to whole bytes.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self
            .bits
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | (b << (7 - i)))
            })
            .collect();
        hex::encode(bytes)
    }

    /// Parses the first `d` bits of an MSB-first hex string.
    pub fn from_hex(text: &str, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(StegoError::invalid("message length must be at least 1"));
        }
        let bytes = hex::decode(text.trim())
            .map_err(|e| StegoError::Parse(format!("malformed hex {text:?}: {e}")))?;
        if bytes.len() * 8 < d {
            return Err(StegoError::Parse(format!(
                "hex encodes {} bits, need {d}",
                bytes.len() * 8
            )));
        }
        let bits = (0..d).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect();
        Ok(Self { bits })
    }

    /// Number of hex characters [`Message::to_hex`] emits for length `d`.
    pub fn hex_len(d: usize) -> usize {
        d.div_ceil(8) * 2
    }
}

impl TryFrom<Vec<u8>> for Message {
    type Error = StegoError;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<Message> for Vec<u8> {
    fn from(m: Message) -> Self {
        m.bits
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}
