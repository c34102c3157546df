//! Small differentiable classifiers with a flat parameter-vector view.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{self, Tape, Var};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TGMD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mlp,
    CnnSmall,
    CnnMedium,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// (C, H, W)
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if self.classes < 2 {
            return Err(Error::Config(format!("class count {} < 2", self.classes)));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("input dims must be positive".into()));
        }
        match self.arch {
            Arch::Mlp => Ok(()),
            Arch::CnnSmall | Arch::CnnMedium => {
                if h % 8 != 0 || w % 8 != 0 {
                    Err(Error::Config(format!("cnn input dims must divide by 8, got {h}x{w}")))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Entry of the flat-parameter index: (name, offset, length).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    params: Vec<Param>,
}

/// One forward pass bound to a tape: parameter leaves, logits and the
/// penultimate feature activations.
pub struct Forward {
    pub params: Vec<Var>,
    pub logits: Var,
    pub penultimate: Var,
}

const MLP_HIDDEN: usize = 64;

impl Model {
    pub fn init(spec: ModelSpec) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (c, h, w) = spec.input_shape;
        let mut params = Vec::new();
        let mut add = |name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Param { name: name.to_string(), shape, data });
        };
        match spec.arch {
            Arch::Mlp => {
                let d = c * h * w;
                add("fc1.w", vec![d, MLP_HIDDEN], d, &mut rng);
                add("fc1.b", vec![MLP_HIDDEN], d, &mut rng);
                add("out.w", vec![MLP_HIDDEN, spec.classes], MLP_HIDDEN, &mut rng);
                add("out.b", vec![spec.classes], MLP_HIDDEN, &mut rng);
            }
            Arch::CnnSmall => {
                add("conv1.w", vec![8, c, 3, 3], c * 9, &mut rng);
                add("conv1.b", vec![8], c * 9, &mut rng);
                add("conv2.w", vec![16, 8, 3, 3], 8 * 9, &mut rng);
                add("conv2.b", vec![16], 8 * 9, &mut rng);
                let flat = 16 * (h / 8) * (w / 8);
                add("out.w", vec![flat, spec.classes], flat, &mut rng);
                add("out.b", vec![spec.classes], flat, &mut rng);
            }
            Arch::CnnMedium => {
                add("conv1.w", vec![8, c, 3, 3], c * 9, &mut rng);
                add("conv1.b", vec![8], c * 9, &mut rng);
                add("conv2.w", vec![8, 8, 3, 3], 8 * 9, &mut rng);
                add("conv2.b", vec![8], 8 * 9, &mut rng);
                add("conv3.w", vec![16, 8, 3, 3], 8 * 9, &mut rng);
                add("conv3.b", vec![16], 8 * 9, &mut rng);
                add("conv4.w", vec![16, 16, 3, 3], 16 * 9, &mut rng);
                add("conv4.b", vec![16], 16 * 9, &mut rng);
                let flat = 16 * (h / 8) * (w / 8);
                add("out.w", vec![flat, spec.classes], flat, &mut rng);
                add("out.b", vec![spec.classes], flat, &mut rng);
            }
        }
        Ok(Model { spec, params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn flat_index(&self) -> Vec<FlatEntry> {
        let mut out = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for p in &self.params {
            out.push(FlatEntry { name: p.name.clone(), offset, len: p.data.len() });
            offset += p.data.len();
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for p in &self.params {
            flat.extend_from_slice(&p.data);
        }
        flat
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "unflatten: {} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.data.len();
            p.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn activate(&self, t: &Tape, x: &Var) -> Result<Var> {
        match self.spec.activation {
            Activation::Gelu => diffcore::gelu(t, x),
            Activation::Relu => t.relu(x),
        }
    }

    /// Build the forward graph for a batch. `images` must be
    /// (n, C, H, W) with pixels in [0, 1]; parameters are bound as leaves.
    pub fn forward(&self, t: &Tape, images: &Var) -> Result<Forward> {
        let (c, h, w) = self.spec.input_shape;
        let s = images.shape().to_vec();
        if s.len() != 4 || (s[1], s[2], s[3]) != (c, h, w) {
            return Err(Error::Shape(format!(
                "forward: expected (n,{c},{h},{w}), got {s:?}"
            )));
        }
        let n = s[0];
        let pvars: Vec<Var> = self
            .params
            .iter()
            .map(|p| t.leaf(&p.shape, p.data.clone()))
            .collect::<Result<_>>()?;

        // map [0,1] pixels to [-1,1]
        let half = t.scalar(0.5)?;
        let two = t.scalar(2.0)?;
        let x = t.mul(&t.sub(images, &half)?, &two)?;

        let (logits, penultimate) = match self.spec.arch {
            Arch::Mlp => {
                let d = c * h * w;
                let flat = t.reshape(&x, &[n, d])?;
                let h1 = t.add(&t.matmul(&flat, &pvars[0])?, &t.col_broadcast(&pvars[1], n)?)?;
                let a1 = self.activate(t, &h1)?;
                let logits = t.add(&t.matmul(&a1, &pvars[2])?, &t.col_broadcast(&pvars[3], n)?)?;
                (logits, a1)
            }
            Arch::CnnSmall => {
                let c1 = t.conv2d(&x, &pvars[0], 2, 1)?;
                let c1 = t.add(&c1, &t.channel_broadcast(&pvars[1], n, h / 2, w / 2)?)?;
                let a1 = self.activate(t, &c1)?;
                let c2 = t.conv2d(&a1, &pvars[2], 2, 1)?;
                let c2 = t.add(&c2, &t.channel_broadcast(&pvars[3], n, h / 4, w / 4)?)?;
                let a2 = self.activate(t, &c2)?;
                let p = t.avg_pool(&a2, 2)?;
                let flat_dim = 16 * (h / 8) * (w / 8);
                let feat = t.reshape(&p, &[n, flat_dim])?;
                let logits = t.add(&t.matmul(&feat, &pvars[4])?, &t.col_broadcast(&pvars[5], n)?)?;
                (logits, feat)
            }
            Arch::CnnMedium => {
                let c1 = t.conv2d(&x, &pvars[0], 1, 1)?;
                let c1 = t.add(&c1, &t.channel_broadcast(&pvars[1], n, h, w)?)?;
                let a1 = self.activate(t, &c1)?;
                let c2 = t.conv2d(&a1, &pvars[2], 2, 1)?;
                let c2 = t.add(&c2, &t.channel_broadcast(&pvars[3], n, h / 2, w / 2)?)?;
                let a2 = self.activate(t, &c2)?;
                let c3 = t.conv2d(&a2, &pvars[4], 1, 1)?;
                let c3 = t.add(&c3, &t.channel_broadcast(&pvars[5], n, h / 2, w / 2)?)?;
                let a3 = self.activate(t, &c3)?;
                let c4 = t.conv2d(&a3, &pvars[6], 2, 1)?;
                let c4 = t.add(&c4, &t.channel_broadcast(&pvars[7], n, h / 4, w / 4)?)?;
                let a4 = self.activate(t, &c4)?;
                let p = t.avg_pool(&a4, 2)?;
                let flat_dim = 16 * (h / 8) * (w / 8);
                let feat = t.reshape(&p, &[n, flat_dim])?;
                let logits = t.add(&t.matmul(&feat, &pvars[8])?, &t.col_broadcast(&pvars[9], n)?)?;
                (logits, feat)
            }
        };
        Ok(Forward { params: pvars, logits, penultimate })
    }

    /// Plain (no-grad) logits for a batch of raw pixel values.
    pub fn logits(&self, images: &[f64], n: usize) -> Result<Vec<f64>> {
        let (c, h, w) = self.spec.input_shape;
        if images.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "logits: {} pixels for batch {n} of {c}x{h}x{w}",
                images.len()
            )));
        }
        let t = Tape::new();
        let x = t.constant(&[n, c, h, w], images.to_vec())?;
        let fwd = self.forward(&t, &x)?;
        Ok(fwd.logits.value())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} out of range 0..{classes}")));
    }
    Ok(())
}

/// Batch loss as a differentiable scalar on `t`, with the forward pass that
/// produced it (so callers can take parameter or pixel gradients).
pub fn loss_on(
    model: &Model,
    t: &Tape,
    images: &Var,
    labels: &[usize],
    kind: LossKind,
) -> Result<(Var, Forward)> {
    check_labels(labels, model.spec.classes)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "loss: batch {} with {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let fwd = model.forward(t, images)?;
    let l = match kind {
        LossKind::Ce => diffcore::cross_entropy(t, &fwd.logits, labels)?,
        LossKind::Bce => diffcore::bce_with_logits(t, &fwd.logits, labels)?,
    };
    Ok((l, fwd))
}

/// Mean loss over a batch of raw pixel values (fresh tape).
pub fn loss(model: &Model, images: &[f64], labels: &[usize], kind: LossKind) -> Result<f64> {
    let (c, h, w) = model.spec.input_shape;
    let t = Tape::new();
    let x = t.constant(&[labels.len(), c, h, w], images.to_vec())?;
    let (l, _) = loss_on(model, &t, &x, labels, kind)?;
    Ok(l.item())
}

/// Flatten per-tensor gradient vars into one flat vector var, in
/// flat-index order.
pub fn flatten_grads(t: &Tape, grads: &[Var]) -> Result<Var> {
    let parts: Vec<Var> = grads
        .iter()
        .map(|g| t.reshape(g, &[g.len()]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Var> = parts.iter().collect();
    t.concat(&refs)
}

/// Flat gradient of the mean batch loss wrt all parameters.
///
/// With `create_graph`, the result stays differentiable (in particular wrt
/// any pixel leaves feeding `images`).
pub fn param_grad_on(
    model: &Model,
    t: &Tape,
    images: &Var,
    labels: &[usize],
    kind: LossKind,
    create_graph: bool,
) -> Result<Var> {
    let (l, fwd) = loss_on(model, t, images, labels, kind)?;
    let prefs: Vec<&Var> = fwd.params.iter().collect();
    let grads = t.grad(&l, &prefs, create_graph)?;
    flatten_grads(t, &grads)
}

/// Flat parameter gradient for raw pixel values (fresh tape, detached).
pub fn param_grad(model: &Model, images: &[f64], labels: &[usize], kind: LossKind) -> Result<Vec<f64>> {
    let (c, h, w) = model.spec.input_shape;
    let t = Tape::new();
    let x = t.constant(&[labels.len(), c, h, w], images.to_vec())?;
    Ok(param_grad_on(model, &t, &x, labels, kind, false)?.value())
}

/// Labels of the k largest logits, descending, ties broken by ascending
/// label index.
pub fn topk_from_logits(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn predict_topk(model: &Model, image: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > model.spec.classes {
        return Err(Error::Config(format!("k={k} out of range 1..={}", model.spec.classes)));
    }
    let logits = model.logits(image, 1)?;
    Ok(topk_from_logits(&logits, k))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    spec: ModelSpec,
    flat_index: Vec<FlatEntry>,
    blob_sha256: String,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let flat = model.flatten();
    let mut blob = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        flat_index: model.flat_index(),
        blob_sha256: hex_digest(&blob),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(hjson.len() as u32).to_le_bytes())?;
    f.write_all(&hjson)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a model checkpoint".into()));
    }
    let mut lenb = [0u8; 4];
    f.read_exact(&mut lenb)?;
    let hlen = u32::from_le_bytes(lenb) as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson)?;
    let header: CheckpointHeader = serde_json::from_slice(&hjson)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint format version {} != {}",
            header.format_version, CHECKPOINT_VERSION
        )));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    if hex_digest(&blob) != header.blob_sha256 {
        return Err(Error::Integrity("checkpoint blob checksum mismatch".into()));
    }
    let mut model = Model::init(header.spec)?;
    if blob.len() != model.param_count() * 8 {
        return Err(Error::Integrity("checkpoint blob size mismatch".into()));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.unflatten(&flat)?;
    Ok(model)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mlp_spec() -> ModelSpec {
        ModelSpec {
            arch: Arch::Mlp,
            input_shape: (3, 8, 8),
            classes: 10,
            seed: 42,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(mlp_spec()).unwrap();
        let b = Model::init(mlp_spec()).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn mlp_param_count_closed_form() {
        let m = Model::init(mlp_spec()).unwrap();
        // 3*8*8*64 + 64 + 64*10 + 10
        assert_eq!(m.param_count(), 3 * 8 * 8 * 64 + 64 + 64 * 10 + 10);
        assert_eq!(m.param_count(), 13002);
    }

    #[test]
    fn cnn_small_forward_shape() {
        let m = Model::init(ModelSpec {
            arch: Arch::CnnSmall,
            input_shape: (3, 32, 32),
            classes: 7,
            seed: 1,
            activation: Activation::Gelu,
        })
        .unwrap();
        let logits = m.logits(&vec![0.0; 3 * 32 * 32], 1).unwrap();
        assert_eq!(logits.len(), 7);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cnn_medium_forward_shape() {
        let m = Model::init(ModelSpec {
            arch: Arch::CnnMedium,
            input_shape: (3, 16, 16),
            classes: 5,
            seed: 2,
            activation: Activation::Gelu,
        })
        .unwrap();
        let logits = m.logits(&vec![0.5; 3 * 16 * 16], 1).unwrap();
        assert_eq!(logits.len(), 5);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut m = Model::init(mlp_spec()).unwrap();
        let flat = m.flatten();
        m.unflatten(&flat).unwrap();
        assert_eq!(m.flatten(), flat);
        assert_eq!(
            m.flat_index().iter().map(|e| e.len).sum::<usize>(),
            m.param_count()
        );
    }

    #[test]
    fn loss_uniform_logits_is_ln_classes() {
        let mut m = Model::init(mlp_spec()).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.unflatten(&zeros).unwrap();
        let img = vec![0.25; 3 * 8 * 8];
        let l = loss(&m, &img, &[3], LossKind::Ce).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_saturated_logits_is_near_zero() {
        let mut m = Model::init(mlp_spec()).unwrap();
        let mut flat = vec![0.0; m.param_count()];
        // out.b occupies the last `classes` entries
        let n = flat.len();
        flat[n - 10 + 3] = 50.0;
        m.unflatten(&flat).unwrap();
        let img = vec![0.25; 3 * 8 * 8];
        let l = loss(&m, &img, &[3], LossKind::Ce).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn label_out_of_range_errors() {
        let m = Model::init(mlp_spec()).unwrap();
        let img = vec![0.25; 3 * 8 * 8];
        assert!(loss(&m, &img, &[10], LossKind::Ce).is_err());
    }

    #[test]
    fn zero_last_layer_blocks_gradient() {
        let mut m = Model::init(mlp_spec()).unwrap();
        let mut flat = m.flatten();
        // zero out.w and out.b
        let idx = m.flat_index();
        for e in &idx {
            if e.name.starts_with("out.") {
                flat[e.offset..e.offset + e.len].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        m.unflatten(&flat).unwrap();
        let img = vec![0.4; 3 * 8 * 8];
        let g = param_grad(&m, &img, &[2], LossKind::Ce).unwrap();
        for e in &idx {
            let slice = &g[e.offset..e.offset + e.len];
            if e.name.starts_with("fc1.") {
                assert!(slice.iter().all(|&v| v == 0.0), "{} should be blocked", e.name);
            }
        }
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let m = Model::init(mlp_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g1 = param_grad(&m, &img, &[2], LossKind::Ce).unwrap();
        let mut img2 = img.clone();
        img2.extend_from_slice(&img);
        let g2 = param_grad(&m, &img2, &[2, 2], LossKind::Ce).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn param_grad_matches_loss_finite_differences() {
        let m = Model::init(ModelSpec { classes: 4, ..mlp_spec() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = [1, 3];
        let g = param_grad(&m, &img, &labels, LossKind::Ce).unwrap();
        let flat = m.flatten();
        let h = 1e-5;
        for _ in 0..10 {
            let i = rng.gen_range(0..flat.len());
            let mut m2 = m.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            m2.unflatten(&fp).unwrap();
            let lp = loss(&m2, &img, &labels, LossKind::Ce).unwrap();
            fp[i] -= 2.0 * h;
            m2.unflatten(&fp).unwrap();
            let lm = loss(&m2, &img, &labels, LossKind::Ce).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1.0);
            assert!((fd - g[i]).abs() / denom <= 1e-5, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn topk_ordering_and_ties() {
        assert_eq!(topk_from_logits(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(topk_from_logits(&[0.0, 0.0, 0.0], 3), vec![0, 1, 2]);
        let m = Model::init(mlp_spec()).unwrap();
        let img = vec![0.3; 3 * 8 * 8];
        let full = predict_topk(&m, &img, 10).unwrap();
        let mut sorted = full.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!(predict_topk(&m, &img, 0).is_err());
        assert!(predict_topk(&m, &img, 11).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = Model::init(mlp_spec()).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.flatten(), m.flatten());
        assert_eq!(loaded.spec, m.spec);

        // truncate -> integrity error
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
