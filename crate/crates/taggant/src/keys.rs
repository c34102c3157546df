//! Secret keys: out-of-distribution noise images paired with uniformly
//! random labels. Label randomness is what makes the detection null
//! distribution exact, so labels are drawn from an rng stream separate
//! from the pixel stream.

use std::path::Path;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::hex_digest;

pub const KEYSET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Key {
    /// (C,H,W) pixels in [0,1].
    pub image: Vec<f64>,
    pub label: usize,
    /// Taggant objective value from crafting; lower is better.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeySet {
    pub keys: Vec<Key>,
    pub seed: u64,
    /// (C,H,W)
    pub shape: (usize, usize, usize),
    pub classes: usize,
}

impl KeySet {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn pixels_per_key(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }
}

/// Generate K keys with i.i.d. uniform pixels and labels.
pub fn generate_keys(count: usize, shape: (usize, usize, usize), classes: usize, seed: u64) -> Result<KeySet> {
    if count == 0 {
        return Err(Error::Config("key count must be >= 1".into()));
    }
    if classes < 2 {
        return Err(Error::Config("class count must be >= 2".into()));
    }
    let n = shape.0 * shape.1 * shape.2;
    if n == 0 {
        return Err(Error::Config("key image shape must be non-empty".into()));
    }
    // independent streams: labels must not depend on pixel draws
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(seed);
    pixel_rng.set_stream(1);
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    label_rng.set_stream(2);

    let keys = (0..count)
        .map(|_| Key {
            image: (0..n).map(|_| pixel_rng.gen_range(0.0..1.0)).collect(),
            label: label_rng.gen_range(0..classes),
            score: None,
        })
        .collect();
    Ok(KeySet { keys, seed, shape, classes })
}

/// Keep the m keys with lowest objective score, preserving original
/// relative order; ties broken by original index.
pub fn select_best_keys(keyset: &KeySet, keep: usize) -> Result<KeySet> {
    if keep > keyset.len() {
        return Err(Error::Config(format!("keep {keep} > {} keys", keyset.len())));
    }
    let scores: Vec<f64> = keyset
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| k.score.ok_or_else(|| Error::Config(format!("key {i} has no objective score"))))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..keyset.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(KeySet {
        keys: chosen.into_iter().map(|i| keyset.keys[i].clone()).collect(),
        ..keyset.clone()
    })
}

#[derive(Serialize, Deserialize)]
struct KeySetFile {
    format_version: u32,
    k: usize,
    shape: (usize, usize, usize),
    classes: usize,
    seed: u64,
    labels: Vec<usize>,
    scores: Vec<Option<f64>>,
    pixels_b64: String,
    pixels_sha256: String,
}

/// Refuse to drop the secret keyset next to a published dataset.
fn check_not_dataset_dir(path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        let text = std::fs::read_to_string(&manifest)?;
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            if v.get("provenance").is_some() {
                return Err(Error::Config(format!(
                    "refusing to write keyset into dataset output directory {}",
                    dir.display()
                )));
            }
        }
    }
    Ok(())
}

pub fn save_keyset(keyset: &KeySet, path: &Path) -> Result<()> {
    check_not_dataset_dir(path)?;
    let mut blob = Vec::with_capacity(keyset.len() * keyset.pixels_per_key() * 8);
    for k in &keyset.keys {
        for v in &k.image {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let file = KeySetFile {
        format_version: KEYSET_VERSION,
        k: keyset.len(),
        shape: keyset.shape,
        classes: keyset.classes,
        seed: keyset.seed,
        labels: keyset.keys.iter().map(|k| k.label).collect(),
        scores: keyset.keys.iter().map(|k| k.score).collect(),
        pixels_sha256: hex_digest(&blob),
        pixels_b64: base64::engine::general_purpose::STANDARD.encode(&blob),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_keyset(path: &Path) -> Result<KeySet> {
    let text = std::fs::read(path)?;
    let file: KeySetFile = serde_json::from_slice(&text)
        .map_err(|e| Error::Integrity(format!("keyset parse failure: {e}")))?;
    if file.format_version != KEYSET_VERSION {
        return Err(Error::Integrity(format!(
            "keyset format version {} != supported {KEYSET_VERSION}",
            file.format_version
        )));
    }
    let blob = base64::engine::general_purpose::STANDARD
        .decode(&file.pixels_b64)
        .map_err(|e| Error::Integrity(format!("keyset blob decode: {e}")))?;
    if hex_digest(&blob) != file.pixels_sha256 {
        return Err(Error::Integrity("keyset pixel checksum mismatch".into()));
    }
    let per = file.shape.0 * file.shape.1 * file.shape.2;
    if blob.len() != file.k * per * 8 || file.labels.len() != file.k || file.scores.len() != file.k {
        return Err(Error::Integrity("keyset field sizes inconsistent".into()));
    }
    let mut keys = Vec::with_capacity(file.k);
    for i in 0..file.k {
        let image: Vec<f64> = blob[i * per * 8..(i + 1) * per * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        keys.push(Key { image, label: file.labels[i], score: file.scores[i] });
    }
    Ok(KeySet { keys, seed: file.seed, shape: file.shape, classes: file.classes })
}
