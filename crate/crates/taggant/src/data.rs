//! In-memory dataset type, the procedural synthetic generator, and the
//! on-disk dataset format (JSON manifest + little-endian float32 blob).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::hex_digest;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Signed,
    Canary,
    Transparency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Flat row-major (N, C, H, W) pixels in [0,1].
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub shape: (usize, usize, usize),
    pub classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.pixels_per_image();
        &mut self.images[i * n..(i + 1) * n]
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("dataset needs >= 2 classes".into()));
        }
        if self.images.len() != self.len() * self.pixels_per_image() {
            return Err(Error::Shape(format!(
                "dataset: {} pixels for {} images of {:?}",
                self.images.len(),
                self.len(),
                self.shape
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Config(format!("label {bad} out of range 0..{}", self.classes)));
        }
        Ok(())
    }
}

/// Class identity -> a deterministic RGB-ish tint, independent of the
/// dataset seed so train and val renders of a class agree.
fn class_tint(class: usize, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1A5_5000 + class as u64);
    (0..channels).map(|_| rng.gen_range(0.35..1.0)).collect()
}

/// Class identity -> a fine oriented grating. Orientations split a half
/// turn evenly among the first half of the classes; the second half reuses
/// the orientations one frequency band up.
fn class_wave(class: usize, classes: usize) -> (f64, f64) {
    let half = classes.div_ceil(2).max(1);
    let theta = std::f64::consts::PI * (class % half) as f64 / half as f64;
    let cpp = if class < half { 0.26 } else { 0.36 }; // cycles per pixel
    (cpp * theta.cos(), cpp * theta.sin())
}

/// Procedural labeled images: the class signal is a fine oriented grating
/// (orientation x frequency band, tinted per class) carried across the
/// whole image, over slowly varying lighting. Per-sample random phase,
/// contrast, lighting gain, pixel noise and a second grating at a random
/// orientation keep the task from being solvable by a couple of filters in
/// one epoch. Because the discriminative cue is high-frequency texture,
/// trained filters respond distinctively to out-of-distribution noise
/// images rather than pooling them to a common feature point. Pixels are
/// quantized to f32 so disk round-trips are exact.
pub fn synthesize(
    n: usize,
    shape: (usize, usize, usize),
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    use std::f64::consts::TAU;
    let (c, h, w) = shape;
    if classes < 2 {
        return Err(Error::Config("synthesize: classes must be >= 2".into()));
    }
    if n == 0 || c == 0 || h < 4 || w < 4 {
        return Err(Error::Config(format!("synthesize: degenerate n={n} shape={shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tints: Vec<Vec<f64>> = (0..classes).map(|cl| class_tint(cl, c)).collect();
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let (fx, fy) = class_wave(class, classes);
        let phase = rng.gen_range(0.0..TAU);
        let amp = rng.gen_range(0.065..0.16);
        let gain = rng.gen_range(0.7..1.3);
        // uninformative second grating: random orientation and band
        let d_theta = rng.gen_range(0.0..std::f64::consts::PI);
        let d_cpp = rng.gen_range(0.22..0.40);
        let (dfx, dfy) = (d_cpp * d_theta.cos(), d_cpp * d_theta.sin());
        let d_phase = rng.gen_range(0.0..TAU);
        let d_amp = rng.gen_range(0.05..0.16);
        let d_class = rng.gen_range(0..classes);
        // slowly varying lighting, uninformative
        let bx = rng.gen_range(0.0..TAU);
        let by = rng.gen_range(0.0..TAU);
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    let x = (col as f64 + 0.5) / w as f64;
                    let y = (row as f64 + 0.5) / h as f64;
                    let noise = rng.gen_range(-0.25..0.25);
                    let base = 0.45 * gain
                        + 0.08 * ((TAU * 1.5 * x + bx).sin() + (TAU * 1.5 * y + by).sin());
                    let v = base
                        + gain
                            * amp
                            * tints[class][ch]
                            * (TAU * (fx * col as f64 + fy * row as f64) + phase).sin()
                        + gain
                            * d_amp
                            * tints[d_class][ch]
                            * (TAU * (dfx * col as f64 + dfy * row as f64) + d_phase).sin();
                    images.push(((v + noise).clamp(0.0, 1.0) as f32) as f64);
                }
            }
        }
    }
    Ok(Dataset { images, labels, shape, classes, provenance: Provenance::Clean })
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    n: usize,
    shape: (usize, usize, usize),
    classes: usize,
    per_class_counts: Vec<usize>,
    provenance: Provenance,
    images_sha256: String,
    labels_sha256: String,
}

fn image_blob(ds: &Dataset) -> Vec<u8> {
    let mut blob = Vec::with_capacity(ds.images.len() * 4);
    for &v in &ds.images {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    blob
}

fn label_blob(ds: &Dataset) -> Vec<u8> {
    let mut blob = Vec::with_capacity(ds.labels.len() * 4);
    for &l in &ds.labels {
        blob.extend_from_slice(&(l as u32).to_le_bytes());
    }
    blob
}

/// Write manifest.json + images.bin + labels.bin into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let images = image_blob(ds);
    let labels = label_blob(ds);
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        n: ds.len(),
        shape: ds.shape,
        classes: ds.classes,
        per_class_counts: ds.per_class_counts(),
        provenance: ds.provenance,
        images_sha256: hex_digest(&images),
        labels_sha256: hex_digest(&labels),
    };
    std::fs::write(dir.join("images.bin"), &images)?;
    std::fs::write(dir.join("labels.bin"), &labels)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
        .map_err(|e| Error::Integrity(format!("dataset manifest parse failure: {e}")))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::Integrity(format!(
            "dataset format version {} != supported {DATASET_VERSION}",
            manifest.format_version
        )));
    }
    let images_raw = std::fs::read(dir.join("images.bin"))?;
    let labels_raw = std::fs::read(dir.join("labels.bin"))?;
    if hex_digest(&images_raw) != manifest.images_sha256 {
        return Err(Error::Integrity("dataset image blob checksum mismatch".into()));
    }
    if hex_digest(&labels_raw) != manifest.labels_sha256 {
        return Err(Error::Integrity("dataset label blob checksum mismatch".into()));
    }
    let per = manifest.shape.0 * manifest.shape.1 * manifest.shape.2;
    if images_raw.len() != manifest.n * per * 4 || labels_raw.len() != manifest.n * 4 {
        return Err(Error::Integrity("dataset blob sizes inconsistent with manifest".into()));
    }
    let ds = Dataset {
        images: images_raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        labels: labels_raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect(),
        shape: manifest.shape,
        classes: manifest.classes,
        provenance: manifest.provenance,
    };
    ds.validate()?;
    if ds.per_class_counts() != manifest.per_class_counts {
        return Err(Error::Integrity("per-class counts disagree with manifest".into()));
    }
    Ok(ds)
}
