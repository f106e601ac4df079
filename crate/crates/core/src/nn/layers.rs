use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Inserts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// All values flattened in registration order, as f32.
    pub fn to_f32_blob(&self) -> Vec<f32> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.f64() as f32))
            .collect()
    }

    /// Overwrites all values from a flat f32 blob produced by
    /// [`ParamStore::to_f32_blob`] on an identically shaped store.
    pub fn load_f32_blob(&mut self, blob: &[f32]) -> Result<(), String> {
        if blob.len() != self.num_values() {
            return Err(format!(
                "parameter count mismatch: expected {}, found {}",
                self.num_values(),
                blob.len()
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            for (d, &s) in t.data_mut().iter_mut().zip(&blob[off..off + n]) {
                *d = T::lit(s as f64);
            }
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the f32 little-endian parameter bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in), the usual default for conv and dense layers.
fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Default,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_c, in_c, kernel, kernel];
        let fan_in = in_c * kernel * kernel;
        let (w, b) = match init {
            Init::Default => (
                fan_in_uniform(&shape, fan_in, rng),
                fan_in_uniform(&[out_c], fan_in, rng),
            ),
            Init::Zero => (Tensor::zeros(&shape), Tensor::zeros(&[out_c])),
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                fan_in_uniform(&[out_f, in_f], in_f, rng),
            ),
            bias: store.add(format!("{name}.bias"), fan_in_uniform(&[out_f], in_f, rng)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}
