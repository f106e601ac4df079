//! Image folders, the probe split, and a procedural generator for smooth
//! natural-looking test images.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, StegoError};
use crate::imaging::{load_image, save_image, ImageTensor};

/// A seeded ChaCha stream. Distinct `stream` values give independent
/// sequences for the same seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Streams used across the crate so no two consumers share a sequence.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const MESSAGES: u64 = 4;
    pub const TRANSFORMS: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const PROBE: u64 = 7;
    /// Base for per-image generator streams.
    pub const PROCEDURAL: u64 = 1 << 32;
}

/// Image files (`.png`, `.jpg`, `.jpeg`) directly inside `dir`, sorted by
/// name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| StegoError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| StegoError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Images of one folder resized to a common size, in file-name order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_images(images: Vec<ImageTensor>) -> Self {
        let names = (0..images.len()).map(|i| format!("img_{i:05}")).collect();
        Self { names, images }
    }

    /// Loads every image with up to `workers` threads. The result order is
    /// the sorted file order regardless of `workers`.
    pub fn load(dir: impl AsRef<Path>, size: (usize, usize), workers: usize) -> Result<Self> {
        let paths = list_images(dir)?;
        let load = || -> Result<Vec<ImageTensor>> { paths.par_iter().map(|p| load_image(p, size)).collect() };
        let images = if workers <= 1 {
            paths.iter().map(|p| load_image(p, size)).collect::<Result<Vec<_>>>()?
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| StegoError::invalid(e.to_string()))?
                .install(load)?
        };
        let names = paths
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        Ok(Self { names, images })
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

/// Seeded split of `0..n` into (train, probe) with `probe_size` probe
/// indices, each list sorted. The probe never takes more than half the data.
pub fn probe_split(n: usize, probe_size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = probe_size.min(n / 2);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, streams::SPLIT));
    let mut probe = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    probe.sort_unstable();
    train.sort_unstable();
    (train, probe)
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn random_colour(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// A smooth synthetic scene: a two-colour gradient, a few soft blobs, an
/// optional soft-edged disc and a faint low-frequency texture. Coordinates
/// are relative so scenes look alike at any resolution.
pub fn procedural_image(height: usize, width: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    let c0 = random_colour(rng);
    let c1 = random_colour(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    struct Blob {
        cy: f32,
        cx: f32,
        r: f32,
        colour: [f32; 3],
        alpha: f32,
    }
    let blobs: Vec<Blob> = (0..rng.random_range(1..=3))
        .map(|_| Blob {
            cy: rng.random_range(0.0..1.0),
            cx: rng.random_range(0.0..1.0),
            r: rng.random_range(0.15..0.35),
            colour: random_colour(rng),
            alpha: rng.random_range(0.4..0.9),
        })
        .collect();
    let disc = rng.random_bool(0.5).then(|| Blob {
        cy: rng.random_range(0.2..0.8),
        cx: rng.random_range(0.2..0.8),
        r: rng.random_range(0.15..0.3),
        colour: random_colour(rng),
        alpha: rng.random_range(0.5..0.9),
    });
    let tex_amp: f32 = rng.random_range(0.0..0.03);
    let (fy, fx, phase): (f32, f32, f32) = (
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(0.0..std::f32::consts::TAU),
    );

    let (hf, wf) = (height as f32, width as f32);
    ImageTensor::from_fn(height, width, |y, x, c| {
        let v = (y as f32 + 0.5) / hf;
        let u = (x as f32 + 0.5) / wf;
        let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        let mut p = c0[c] * (1.0 - t) + c1[c] * t;
        for b in &blobs {
            let d2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
            let a = b.alpha * (-d2 / (2.0 * b.r * b.r)).exp();
            p = p * (1.0 - a) + b.colour[c] * a;
        }
        if let Some(b) = &disc {
            let d = ((u - b.cx).powi(2) + (v - b.cy).powi(2)).sqrt();
            // edge softened over about a tenth of the radius
            let a = b.alpha * (1.0 - smoothstep(b.r * 0.9, b.r * 1.1, d));
            p = p * (1.0 - a) + b.colour[c] * a;
        }
        p + tex_amp * (std::f32::consts::TAU * (fy * v + fx * u) + phase + c as f32).sin()
    })
}

/// `count` procedural images; image `i` depends only on `(seed, i)`.
pub fn procedural_images(count: usize, size: (usize, usize), seed: u64) -> Result<Vec<ImageTensor>> {
    (0..count)
        .into_par_iter()
        .map(|i| procedural_image(size.0, size.1, &mut seeded_rng(seed, streams::PROCEDURAL + i as u64)))
        .collect()
}

/// Writes [`procedural_images`] as `img_00000.png`, `img_00001.png`, ...
pub fn write_procedural_dataset(dir: impl AsRef<Path>, count: usize, size: (usize, usize), seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| StegoError::io(dir, e))?;
    procedural_images(count, size, seed)?
        .par_iter()
        .enumerate()
        .try_for_each(|(i, img)| save_image(img, dir.join(format!("img_{i:05}.png"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_is_deterministic_and_valid() {
        let a = procedural_images(4, (32, 32), 7).unwrap();
        let b = procedural_images(4, (32, 32), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for img in &a {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (train, probe) = probe_split(200, 64, 3);
        assert_eq!(probe.len(), 64);
        assert_eq!(train.len(), 136);
        assert!(probe.iter().all(|p| !train.contains(p)));
        assert_eq!(probe_split(200, 64, 3), (train, probe.clone()));
        assert_ne!(probe_split(200, 64, 4).1, probe);
        assert_eq!(probe_split(10, 64, 0).1.len(), 5);
    }

    #[test]
    fn folder_round_trip_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        write_procedural_dataset(dir.path(), 5, (16, 16), 1).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let serial = Dataset::load(dir.path(), (16, 16), 1).unwrap();
        let parallel = Dataset::load(dir.path(), (16, 16), 3).unwrap();
        assert_eq!(serial.len(), 5);
        assert_eq!(serial.names[0], "img_00000.png");
        assert_eq!(serial.images, parallel.images);
        assert!(Dataset::load(dir.path().join("missing"), (16, 16), 1).is_err());
    }
}
