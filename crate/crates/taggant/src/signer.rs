//! Dataset signing: split the signing budget across keys, craft per-image
//! perturbations that align sample gradients with each key's gradient,
//! and apply them under an L-infinity constraint. Also hosts the naive
//! canary and transparency baselines.

use std::path::Path;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentRecipe, RecipeId};
use crate::data::{Dataset, Provenance};
use crate::diffcore::{cosine, Tape, Var};
use crate::error::{Error, Result};
use crate::keys::{Key, KeySet};
use crate::models::{self, hex_digest, LossKind, Model};

pub const SIGNATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraftConfig {
    /// L-infinity bound on every perturbation.
    pub eps: f64,
    /// Perceptual regularization weight.
    pub lambda: f64,
    /// Augmentation repeats per image when estimating the expected gradient.
    pub repeats: usize,
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub recipe: RecipeId,
    pub loss: LossKind,
    pub seed: u64,
}

impl CraftConfig {
    pub fn new(eps: f64) -> Self {
        CraftConfig {
            eps,
            lambda: 0.01,
            repeats: 4,
            restarts: 8,
            steps: 250,
            step_size: 0.1 * eps,
            recipe: RecipeId::Simple,
            loss: LossKind::Ce,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps {} must be >= 0", self.eps)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.restarts == 0 || self.repeats == 0 {
            return Err(Error::Config("restarts and repeats must be >= 1".into()));
        }
        if self.step_size < 0.0 {
            return Err(Error::Config("step size must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which dataset indices each key signs. Lists are disjoint, sized within
/// one of each other, and clean-label (every index carries its key's label).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigningPlan {
    pub budget: f64,
    pub total: usize,
    pub per_key: Vec<Vec<usize>>,
}

impl SigningPlan {
    pub fn validate(&self, dataset: &Dataset, keyset: &KeySet) -> Result<()> {
        if self.per_key.len() != keyset.len() {
            return Err(Error::Config(format!(
                "plan has {} key lists for {} keys",
                self.per_key.len(),
                keyset.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut sizes = Vec::new();
        for (i, list) in self.per_key.iter().enumerate() {
            sizes.push(list.len());
            for &j in list {
                if j >= dataset.len() {
                    return Err(Error::Config(format!("plan index {j} out of range")));
                }
                if !seen.insert(j) {
                    return Err(Error::Config(format!("plan index {j} assigned twice")));
                }
                if dataset.labels[j] != keyset.keys[i].label {
                    return Err(Error::Config(format!(
                        "clean-label violation: index {j} has label {} for key label {}",
                        dataset.labels[j], keyset.keys[i].label
                    )));
                }
            }
        }
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if max - min > 1 {
            return Err(Error::Config(format!("per-key sizes unbalanced: {sizes:?}")));
        }
        if seen.len() != self.total {
            return Err(Error::Config(format!("plan total {} != {} indices", self.total, seen.len())));
        }
        Ok(())
    }
}

/// Sample the signing set: S = round(B*N) images, split evenly across keys
/// (first S mod K keys get one extra), drawn uniformly without replacement
/// from each key's label class.
pub fn select_signing_set(dataset: &Dataset, keyset: &KeySet, budget: f64, seed: u64) -> Result<SigningPlan> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Config(format!("budget {budget} outside [0,1]")));
    }
    dataset.validate()?;
    if dataset.classes != keyset.classes {
        return Err(Error::Config(format!(
            "dataset classes {} != keyset classes {}",
            dataset.classes, keyset.classes
        )));
    }
    let total = (budget * dataset.len() as f64).round() as usize;
    let k = keyset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = vec![false; dataset.len()];
    let mut per_key = Vec::with_capacity(k);
    for (i, key) in keyset.keys.iter().enumerate() {
        let want = total / k + usize::from(i < total % k);
        let mut pool: Vec<usize> = (0..dataset.len())
            .filter(|&j| dataset.labels[j] == key.label && !used[j])
            .collect();
        if pool.len() < want {
            return Err(Error::Config(format!(
                "key {i} (label {}) needs {want} samples, class has only {} left",
                key.label,
                pool.len()
            )));
        }
        // partial Fisher-Yates: first `want` entries are a uniform sample
        for p in 0..want {
            let q = rng.gen_range(p..pool.len());
            pool.swap(p, q);
        }
        pool.truncate(want);
        pool.sort_unstable();
        for &j in &pool {
            used[j] = true;
        }
        per_key.push(pool);
    }
    let plan = SigningPlan { budget, total, per_key };
    plan.validate(dataset, keyset)?;
    Ok(plan)
}

// ------------------------------------------------------------- perceptual

/// Fixed random-conv feature pyramid standing in for a pretrained deep
/// perceptual metric: three stride-2 conv+relu stages whose feature maps
/// are unit-normalized per channel before squared-distance comparison.
#[derive(Clone, Debug)]
pub struct PercExtractor {
    weights: Vec<(Vec<usize>, Vec<f64>)>,
    pub seed: u64,
}

impl PercExtractor {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7065_7263);
        let widths = [channels, 8, 8, 8];
        let weights = (0..3)
            .map(|l| {
                let (ci, co) = (widths[l], widths[l + 1]);
                let bound = 1.0 / ((ci * 9) as f64).sqrt();
                let data = (0..co * ci * 9).map(|_| rng.gen_range(-bound..bound)).collect();
                (vec![co, ci, 3, 3], data)
            })
            .collect();
        PercExtractor { weights, seed }
    }

    /// Normalized feature maps for a (n,C,H,W) batch.
    fn features(&self, t: &Tape, x: &Var) -> Result<Vec<Var>> {
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(self.weights.len());
        for (shape, data) in &self.weights {
            let w = t.constant(shape, data.clone())?;
            cur = t.relu(&t.conv2d(&cur, &w, 2, 1)?)?;
            let s = cur.shape().to_vec();
            let sq = t.mul(&cur, &cur)?;
            let norm = t.sqrt(&t.add(&t.channel_sum(&sq)?, &t.scalar(1e-8)?)?)?;
            let inv = t.div(&t.scalar(1.0)?, &norm)?;
            let bc = t.channel_broadcast(&inv, s[0], s[2], s[3])?;
            out.push(t.mul(&cur, &bc)?);
        }
        Ok(out)
    }
}

/// Mean squared distance between normalized deep features of two batches.
/// Zero iff the batches are identical; differentiable wrt both.
pub fn perceptual_loss(t: &Tape, extractor: &PercExtractor, original: &Var, perturbed: &Var) -> Result<Var> {
    if original.shape() != perturbed.shape() {
        return Err(Error::Shape(format!(
            "perceptual_loss: {:?} vs {:?}",
            original.shape(),
            perturbed.shape()
        )));
    }
    let fa = extractor.features(t, original)?;
    let fb = extractor.features(t, perturbed)?;
    let mut total = t.scalar(0.0)?;
    for (a, b) in fa.iter().zip(&fb) {
        let d = t.sub(a, b)?;
        let ms = t.mul(&t.sum_all(&t.mul(&d, &d)?)?, &t.scalar(1.0 / d.len() as f64)?)?;
        total = t.add(&total, &ms)?;
    }
    Ok(total)
}

// -------------------------------------------------------------- objective

/// Detached flat parameter gradient at the key; error when degenerate.
fn key_gradient(model: &Model, key: &Key, loss: LossKind) -> Result<Vec<f64>> {
    let g = models::param_grad(model, &key.image, &[key.label], loss)?;
    let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numerical("key gradient has zero norm".into()));
    }
    Ok(g)
}

/// Batched alignment term for one key: the expected perturbed-sample
/// gradients of all its images enter one mean-loss backward pass (cosine
/// is scale-invariant, so the mean stands in for the per-image sum).
/// With several surrogates the per-surrogate terms are averaged, which
/// makes the perturbation less specific to any single set of weights.
/// Returns mean over surrogates of -cos(key gradient, batch gradient),
/// differentiable wrt deltas.
#[allow(clippy::too_many_arguments)]
fn alignment_on(
    t: &Tape,
    surrogates: &[&Model],
    key_grads: &[Vec<f64>],
    label: usize,
    dataset: &Dataset,
    indices: &[usize],
    deltas: &[Var],
    cfg: &CraftConfig,
    rng: &mut ChaCha8Rng,
    create_graph: bool,
) -> Result<(Var, Vec<Var>)> {
    let (c, h, w) = dataset.shape;
    let npix = c * h * w;
    let recipe = AugmentRecipe::from_id(cfg.recipe);
    let repeats = if cfg.recipe == RecipeId::None { 1 } else { cfg.repeats };
    let mut rows = Vec::with_capacity(indices.len() * repeats);
    let mut labels = Vec::with_capacity(indices.len() * repeats);
    let mut perturbed = Vec::with_capacity(indices.len());
    for (jj, &j) in indices.iter().enumerate() {
        let x = t.constant(&[c, h, w], dataset.image(j).to_vec())?;
        let xd = t.clamp(&t.add(&x, &deltas[jj])?, 0.0, 1.0)?;
        perturbed.push(xd.clone());
        for _ in 0..repeats {
            let tr = augment::sample_transform(&recipe, rng)?;
            let a = augment::apply(t, &tr, &xd)?;
            rows.push(t.reshape(&a, &[npix])?);
            labels.push(label);
        }
    }
    let refs: Vec<&Var> = rows.iter().collect();
    let batch = t.reshape(&t.concat(&refs)?, &[labels.len(), c, h, w])?;
    let mut ti = t.scalar(0.0)?;
    for (model, key_grad) in surrogates.iter().zip(key_grads) {
        let g = models::param_grad_on(model, t, &batch, &labels, cfg.loss, create_graph)?;
        let gk = t.constant(&[key_grad.len()], key_grad.to_vec())?;
        ti = t.sub(&ti, &cosine(t, &g, &gk)?)?;
    }
    ti = t.mul(&ti, &t.scalar(1.0 / surrogates.len() as f64)?)?;
    Ok((ti, perturbed))
}

/// Full per-key objective T_i as a differentiable scalar on `t`. `deltas`
/// must be leaves on `t`, one per entry of `indices`.
pub fn taggant_objective(
    t: &Tape,
    model: &Model,
    key: &Key,
    dataset: &Dataset,
    indices: &[usize],
    deltas: &[Var],
    cfg: &CraftConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if indices.len() != deltas.len() {
        return Err(Error::Config(format!(
            "{} deltas for {} indices",
            deltas.len(),
            indices.len()
        )));
    }
    let key_grad = key_gradient(model, key, cfg.loss)?;
    let (ti, _) = alignment_on(
        t,
        &[model],
        std::slice::from_ref(&key_grad),
        key.label,
        dataset,
        indices,
        deltas,
        cfg,
        rng,
        true,
    )?;
    Ok(ti)
}

// ----------------------------------------------------------------- craft

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub eps: f64,
    pub plan: SigningPlan,
    pub config: CraftConfig,
    /// Final alignment objective per key (+1 marks a crafting failure).
    pub key_scores: Vec<f64>,
    /// Perturbations per key, one (C*H*W) tensor per planned index.
    pub deltas: Vec<Vec<Vec<f64>>>,
}

impl Signature {
    pub fn signed_indices(&self) -> Vec<usize> {
        self.plan.per_key.iter().flatten().copied().collect()
    }
}

fn mix_seed(seed: u64, key: usize, restart: usize) -> u64 {
    // splitmix64 over a composite counter
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(1 + key as u64 * 1024 + restart as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct RestartOutcome {
    deltas: Vec<Vec<f64>>,
    objective: f64,
    alignment: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_restart(
    surrogates: &[&Model],
    key_grads: &[Vec<f64>],
    label: usize,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &CraftConfig,
    extractor: &PercExtractor,
    seed: u64,
) -> Result<RestartOutcome> {
    let (c, h, w) = dataset.shape;
    let npix = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let project = |deltas: &mut [Vec<f64>]| {
        for (jj, &j) in indices.iter().enumerate() {
            let x = dataset.image(j);
            for (d, &xv) in deltas[jj].iter_mut().zip(x) {
                *d = d.clamp(-cfg.eps, cfg.eps).clamp(-xv, 1.0 - xv);
            }
        }
    };
    let mut deltas: Vec<Vec<f64>> = indices
        .iter()
        .map(|_| (0..npix).map(|_| rng.gen_range(-cfg.eps..=cfg.eps)).collect())
        .collect();
    project(&mut deltas);

    let mut m = vec![vec![0.0; npix]; indices.len()];
    let mut v = vec![vec![0.0; npix]; indices.len()];
    let (b1, b2, adam_eps) = (0.9f64, 0.999f64, 1e-8);

    let evaluate = |deltas: &[Vec<f64>], rng: &mut ChaCha8Rng, with_grad: bool| -> Result<(f64, f64, Vec<Vec<f64>>)> {
        let t = Tape::new();
        let dvars: Vec<Var> = deltas
            .iter()
            .map(|d| t.leaf(&[c, h, w], d.clone()))
            .collect::<Result<_>>()?;
        let (ti, perturbed) =
            alignment_on(&t, surrogates, key_grads, label, dataset, indices, &dvars, cfg, rng, with_grad)?;
        let mut obj = ti.clone();
        if cfg.lambda > 0.0 {
            let orig: Vec<f64> = indices.iter().flat_map(|&j| dataset.image(j).to_vec()).collect();
            let a = t.constant(&[indices.len(), c, h, w], orig)?;
            let prefs: Vec<&Var> = perturbed.iter().collect();
            let flat: Vec<Var> = prefs.iter().map(|p| t.reshape(p, &[npix])).collect::<Result<_>>()?;
            let frefs: Vec<&Var> = flat.iter().collect();
            let b = t.reshape(&t.concat(&frefs)?, &[indices.len(), c, h, w])?;
            let perc = perceptual_loss(&t, extractor, &a, &b)?;
            obj = t.add(&obj, &t.mul(&t.scalar(cfg.lambda)?, &perc)?)?;
        }
        if !with_grad {
            return Ok((obj.item(), ti.item(), vec![]));
        }
        let drefs: Vec<&Var> = dvars.iter().collect();
        let grads = t.grad(&obj, &drefs, false)?;
        Ok((obj.item(), ti.item(), grads.iter().map(|g| g.value()).collect()))
    };

    for step in 0..cfg.steps {
        let (_, _, grads) = evaluate(&deltas, &mut rng, true)?;
        let bc1 = 1.0 - b1.powi(step as i32 + 1);
        let bc2 = 1.0 - b2.powi(step as i32 + 1);
        for jj in 0..indices.len() {
            for p in 0..npix {
                let g = grads[jj][p];
                m[jj][p] = b1 * m[jj][p] + (1.0 - b1) * g;
                v[jj][p] = b2 * v[jj][p] + (1.0 - b2) * g * g;
                deltas[jj][p] -= cfg.step_size * (m[jj][p] / bc1) / ((v[jj][p] / bc2).sqrt() + adam_eps);
            }
        }
        project(&mut deltas);
    }
    let (objective, alignment, _) = evaluate(&deltas, &mut rng, false)?;
    Ok(RestartOutcome { deltas, objective, alignment })
}

/// Craft the full signature: per key, `restarts` projected adaptive-moment
/// descents on the perturbations, keeping the restart with the lowest
/// final objective. Keys run in parallel; results merge in key order.
pub fn craft_signature(
    model: &Model,
    keyset: &KeySet,
    dataset: &Dataset,
    plan: &SigningPlan,
    cfg: &CraftConfig,
) -> Result<Signature> {
    craft_signature_ensemble(&[model], keyset, dataset, plan, cfg)
}

/// Like [`craft_signature`], but aligns against several surrogate models at
/// once (typically snapshots of the same training run at different epochs).
/// Averaging the alignment term over training stages keeps the perturbation
/// from specializing to one set of weights and transfers noticeably better
/// to an independently trained model.
pub fn craft_signature_ensemble(
    surrogates: &[&Model],
    keyset: &KeySet,
    dataset: &Dataset,
    plan: &SigningPlan,
    cfg: &CraftConfig,
) -> Result<Signature> {
    cfg.validate()?;
    plan.validate(dataset, keyset)?;
    if surrogates.is_empty() {
        return Err(Error::Config("at least one surrogate model is required".into()));
    }
    for model in surrogates {
        if model.spec.input_shape != dataset.shape || model.spec.classes != dataset.classes {
            return Err(Error::Config("model spec does not match dataset".into()));
        }
    }
    let extractor = PercExtractor::new(dataset.shape.0, cfg.seed);
    let npix = dataset.pixels_per_image();

    let per_key: Vec<(Vec<Vec<f64>>, f64)> = keyset
        .keys
        .par_iter()
        .enumerate()
        .map(|(i, key)| -> Result<(Vec<Vec<f64>>, f64)> {
            let indices = &plan.per_key[i];
            let zeros = vec![vec![0.0; npix]; indices.len()];
            if indices.is_empty() {
                return Ok((zeros, 1.0));
            }
            let mut key_grads = Vec::with_capacity(surrogates.len());
            for model in surrogates {
                match key_gradient(model, key, cfg.loss) {
                    Ok(g) => key_grads.push(g),
                    // degenerate key: crafting failure, worst possible score
                    Err(Error::Numerical(_)) => return Ok((zeros, 1.0)),
                    Err(e) => return Err(e),
                }
            }
            let mut best: Option<RestartOutcome> = None;
            let mut failures = 0;
            for r in 0..cfg.restarts {
                match run_restart(surrogates, &key_grads, key.label, dataset, indices, cfg, &extractor, mix_seed(cfg.seed, i, r)) {
                    Ok(out) => {
                        if best.as_ref().map_or(true, |b| out.objective < b.objective) {
                            best = Some(out);
                        }
                    }
                    Err(Error::NonFinite(_)) => failures += 1,
                    Err(e) => return Err(e),
                }
            }
            match best {
                Some(out) => Ok((out.deltas, out.alignment)),
                None => Err(Error::Numerical(format!(
                    "key {i}: all {failures} restarts hit non-finite objectives"
                ))),
            }
        })
        .collect::<Result<_>>()?;

    Ok(Signature {
        eps: cfg.eps,
        plan: plan.clone(),
        config: cfg.clone(),
        key_scores: per_key.iter().map(|(_, s)| *s).collect(),
        deltas: per_key.into_iter().map(|(d, _)| d).collect(),
    })
}

/// Replace the planned images by clamp(x + delta); everything else,
/// including every label, is copied bit-identically.
pub fn apply_signature(dataset: &Dataset, signature: &Signature) -> Result<Dataset> {
    let npix = dataset.pixels_per_image();
    let mut out = dataset.clone();
    for (list, deltas) in signature.plan.per_key.iter().zip(&signature.deltas) {
        if list.len() != deltas.len() {
            return Err(Error::Config("signature deltas do not match plan".into()));
        }
        for (&j, delta) in list.iter().zip(deltas) {
            if j >= dataset.len() {
                return Err(Error::Config(format!("signature index {j} out of range")));
            }
            if delta.len() != npix {
                return Err(Error::Shape(format!("delta for index {j} has {} pixels", delta.len())));
            }
            if let Some(&d) = delta.iter().find(|d| d.abs() > signature.eps + 1e-12) {
                return Err(Error::Config(format!("delta {d} exceeds eps {}", signature.eps)));
            }
            let img = out.image_mut(j);
            for (x, &d) in img.iter_mut().zip(delta) {
                *x = (*x + d).clamp(0.0, 1.0);
            }
        }
    }
    out.provenance = Provenance::Signed;
    Ok(out)
}

/// Baseline: overwrite round(B*N) samples with verbatim key image/label
/// pairs, keys cycled evenly. Replacement keeps N fixed.
pub fn baseline_naive_canary(dataset: &Dataset, keyset: &KeySet, budget: f64, seed: u64) -> Result<Dataset> {
    if dataset.shape != keyset.shape || dataset.classes != keyset.classes {
        return Err(Error::Config("keyset shape/classes do not match dataset".into()));
    }
    let total = (budget * dataset.len() as f64).round() as usize;
    if total < keyset.len() {
        return Err(Error::Config(format!(
            "budget yields {total} slots for {} keys",
            keyset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<usize> = (0..dataset.len()).collect();
    for p in 0..total {
        let q = rng.gen_range(p..slots.len());
        slots.swap(p, q);
    }
    slots.truncate(total);
    slots.sort_unstable();
    let mut out = dataset.clone();
    for (c, &j) in slots.iter().enumerate() {
        let key = &keyset.keys[c % keyset.len()];
        out.image_mut(j).copy_from_slice(&key.image);
        out.labels[j] = key.label;
    }
    out.provenance = Provenance::Canary;
    Ok(out)
}

/// Baseline: blend each planned image toward its key, x' = g*key + (1-g)*x,
/// labels unchanged.
pub fn baseline_transparency(dataset: &Dataset, keyset: &KeySet, plan: &SigningPlan, gamma: f64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0,1]")));
    }
    if dataset.shape != keyset.shape {
        return Err(Error::Config("keyset shape does not match dataset".into()));
    }
    plan.validate(dataset, keyset)?;
    let mut out = dataset.clone();
    for (key, list) in keyset.keys.iter().zip(&plan.per_key) {
        for &j in list {
            let img = out.image_mut(j);
            for (x, &kv) in img.iter_mut().zip(&key.image) {
                *x = gamma * kv + (1.0 - gamma) * *x;
            }
        }
    }
    out.provenance = Provenance::Transparency;
    Ok(out)
}

// ------------------------------------------------------------------ files

#[derive(Serialize, Deserialize)]
struct SignatureFile {
    format_version: u32,
    eps: f64,
    plan: SigningPlan,
    config: CraftConfig,
    key_scores: Vec<f64>,
    deltas_sha256: String,
    deltas_b64: String,
}

pub fn save_signature(sig: &Signature, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    for per_key in &sig.deltas {
        for delta in per_key {
            for v in delta {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let file = SignatureFile {
        format_version: SIGNATURE_VERSION,
        eps: sig.eps,
        plan: sig.plan.clone(),
        config: sig.config.clone(),
        key_scores: sig.key_scores.clone(),
        deltas_sha256: hex_digest(&blob),
        deltas_b64: base64::engine::general_purpose::STANDARD.encode(&blob),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_signature(path: &Path, pixels_per_image: usize) -> Result<Signature> {
    let file: SignatureFile = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Integrity(format!("signature parse failure: {e}")))?;
    if file.format_version != SIGNATURE_VERSION {
        return Err(Error::Integrity(format!(
            "signature format version {} != supported {SIGNATURE_VERSION}",
            file.format_version
        )));
    }
    let blob = base64::engine::general_purpose::STANDARD
        .decode(&file.deltas_b64)
        .map_err(|e| Error::Integrity(format!("signature blob decode: {e}")))?;
    if hex_digest(&blob) != file.deltas_sha256 {
        return Err(Error::Integrity("signature delta checksum mismatch".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.len() != file.plan.total * pixels_per_image {
        return Err(Error::Integrity("signature blob size inconsistent with plan".into()));
    }
    let mut cursor = 0;
    let mut deltas = Vec::with_capacity(file.plan.per_key.len());
    for list in &file.plan.per_key {
        let mut per_key = Vec::with_capacity(list.len());
        for _ in list {
            per_key.push(values[cursor..cursor + pixels_per_image].to_vec());
            cursor += pixels_per_image;
        }
        deltas.push(per_key);
    }
    Ok(Signature {
        eps: file.eps,
        plan: file.plan,
        config: file.config,
        key_scores: file.key_scores,
        deltas,
    })
}
