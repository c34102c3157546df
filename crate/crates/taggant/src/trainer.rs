//! Minibatch training of Alice's surrogate and Bob's suspect models:
//! momentum SGD with linear warmup and cosine decay, discrete
//! augmentation, and optional (default-off) mixup/cutmix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentRecipe, RecipeId};
use crate::data::Dataset;
use crate::diffcore::{self, Tape};
use crate::error::{Error, Result};
use crate::models::{self, LossKind, Model, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub loss: LossKind,
    pub recipe: RecipeId,
    pub seed: u64,
    /// Probability of replacing a batch by its mixup blend; default off.
    pub mixup_prob: f64,
    /// Probability of replacing a batch by its cutmix splice; default off.
    pub cutmix_prob: f64,
}

impl TrainConfig {
    pub fn new(spec: ModelSpec) -> Self {
        TrainConfig {
            spec,
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            warmup_epochs: 1,
            weight_decay: 1e-4,
            momentum: 0.9,
            loss: LossKind::Ce,
            recipe: RecipeId::Simple,
            seed: 0,
            mixup_prob: 0.0,
            cutmix_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        for (name, p) in [("mixup_prob", self.mixup_prob), ("cutmix_prob", self.cutmix_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_val_accuracy: f64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps_run: usize,
    pub seed: u64,
    /// Informational only; excluded from any determinism-sensitive hashing.
    pub wall_seconds: f64,
}

fn lr_at(cfg: &TrainConfig, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        cfg.lr * (step + 1) as f64 / warmup_steps as f64
    } else if total_steps > warmup_steps {
        let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    } else {
        cfg.lr
    }
}

/// One gradient step's loss graph: plain CE/BCE, or a two-label convex
/// combination when the batch was mixed.
fn batch_loss_and_grad(
    model: &Model,
    images: Vec<f64>,
    labels_a: &[usize],
    labels_b: Option<(&[usize], f64)>,
    loss: LossKind,
    shape: (usize, usize, usize),
) -> Result<(f64, Vec<f64>)> {
    let (c, h, w) = shape;
    let n = labels_a.len();
    let t = Tape::new();
    let x = t.constant(&[n, c, h, w], images)?;
    let fwd = model.forward(&t, &x)?;
    let term = |labels: &[usize]| -> Result<crate::diffcore::Var> {
        match loss {
            LossKind::Ce => diffcore::cross_entropy(&t, &fwd.logits, labels),
            LossKind::Bce => diffcore::bce_with_logits(&t, &fwd.logits, labels),
        }
    };
    let l = match labels_b {
        None => term(labels_a)?,
        Some((lb, lam)) => {
            let la = term(labels_a)?;
            let lbv = term(lb)?;
            t.add(
                &t.mul(&t.scalar(lam)?, &la)?,
                &t.mul(&t.scalar(1.0 - lam)?, &lbv)?,
            )?
        }
    };
    let prefs: Vec<&crate::diffcore::Var> = fwd.params.iter().collect();
    let grads = t.grad(&l, &prefs, false)?;
    let flat = models::flatten_grads(&t, &grads)?;
    Ok((l.item(), flat.value()))
}

/// Deterministic minibatch training. Returns the trained model and a
/// report with the loss curve and final validation accuracy.
pub fn train(dataset: &Dataset, valset: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    dataset.validate()?;
    valset.validate()?;
    if dataset.shape != valset.shape || dataset.classes != valset.classes {
        return Err(Error::Config("train/val shape or class mismatch".into()));
    }
    if cfg.spec.input_shape != dataset.shape || cfg.spec.classes != dataset.classes {
        return Err(Error::Config("model spec does not match dataset".into()));
    }
    let start = std::time::Instant::now();
    let mut model = Model::init(cfg.spec.clone())?;
    let mut theta = model.flatten();
    let mut velocity = vec![0.0; theta.len()];
    let recipe = AugmentRecipe::from_id(cfg.recipe);
    let (c, h, w) = dataset.shape;
    let npix = c * h * w;
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs.min(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for p in 0..n.saturating_sub(1) {
            let q = rng.gen_range(p..n);
            order.swap(p, q);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut images = Vec::with_capacity(b * npix);
            let mut labels = Vec::with_capacity(b);
            for &j in chunk {
                let tr = augment::sample_transform(&recipe, &mut rng)?;
                images.extend(augment::apply_discrete(&tr, dataset.image(j), c, h, w)?);
                labels.push(dataset.labels[j]);
            }
            // batch-level mix draws keep the rng stream advancing identically
            // whether or not the gates are open
            let mix_roll: f64 = rng.gen();
            let mut labels_b = None;
            let mut shifted = labels.clone();
            shifted.rotate_right(1);
            if mix_roll < cfg.mixup_prob {
                let lam: f64 = rng.gen_range(0.3..0.7);
                let mixed: Vec<f64> = (0..b * npix)
                    .map(|i| {
                        let row = i / npix;
                        let partner = (row + b - 1) % b;
                        lam * images[i] + (1.0 - lam) * images[partner * npix + i % npix]
                    })
                    .collect();
                images = mixed;
                labels_b = Some((shifted.as_slice(), lam));
            } else if mix_roll < cfg.mixup_prob + cfg.cutmix_prob {
                let cut_h = rng.gen_range(1..=h / 2);
                let cut_w = rng.gen_range(1..=w / 2);
                let top = rng.gen_range(0..=h - cut_h);
                let left = rng.gen_range(0..=w - cut_w);
                let original = images.clone();
                for row in 0..b {
                    let partner = (row + b - 1) % b;
                    for ch in 0..c {
                        for y in top..top + cut_h {
                            for x0 in left..left + cut_w {
                                let off = (ch * h + y) * w + x0;
                                images[row * npix + off] = original[partner * npix + off];
                            }
                        }
                    }
                }
                let lam = 1.0 - (cut_h * cut_w) as f64 / (h * w) as f64;
                labels_b = Some((shifted.as_slice(), lam));
            }
            let step_result = batch_loss_and_grad(&model, images, &labels, labels_b, cfg.loss, dataset.shape);
            let (loss, grad) = match step_result {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    return Err(Error::Numerical(format!("training diverged at epoch {epoch}: {msg}")));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training diverged at epoch {epoch}")));
            }
            epoch_loss += loss;
            let lr = lr_at(cfg, step, warmup_steps, total_steps);
            for i in 0..theta.len() {
                velocity[i] = cfg.momentum * velocity[i] + grad[i] + cfg.weight_decay * theta[i];
                theta[i] -= lr * velocity[i];
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}: non-finite parameters"
                )));
            }
            model.unflatten(&theta)?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    let final_val_accuracy = match evaluate(&model, valset) {
        Ok(a) => a,
        Err(Error::NonFinite(msg)) => {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {}: {msg}",
                cfg.epochs - 1
            )));
        }
        Err(e) => return Err(e),
    };
    let report = TrainReport {
        final_val_accuracy,
        epoch_losses,
        steps_run: step,
        seed: cfg.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Top-1 accuracy, ties broken toward the lowest label index (the same
/// rule the detector's top-k uses).
pub fn evaluate(model: &Model, valset: &Dataset) -> Result<f64> {
    valset.validate()?;
    if valset.is_empty() {
        return Err(Error::Config("evaluate: empty validation set".into()));
    }
    if model.spec.input_shape != valset.shape || model.spec.classes != valset.classes {
        return Err(Error::Config("model spec does not match validation set".into()));
    }
    let classes = valset.classes;
    let npix = valset.pixels_per_image();
    let mut correct = 0usize;
    for chunk_start in (0..valset.len()).step_by(64) {
        let b = 64.min(valset.len() - chunk_start);
        let images = &valset.images[chunk_start * npix..(chunk_start + b) * npix];
        let logits = model.logits(images, b)?;
        for r in 0..b {
            let row = &logits[r * classes..(r + 1) * classes];
            let top = models::topk_from_logits(row, 1)[0];
            if top == valset.labels[chunk_start + r] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / valset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::models::{Activation, Arch};

    fn blob_dataset(n: usize, seed: u64) -> Dataset {
        // two linearly separable clusters: dark images vs bright images
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let npix = 16;
        let mut images = Vec::with_capacity(n * npix);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            labels.push(class);
            let (lo, hi) = if class == 0 { (0.0, 0.35) } else { (0.65, 1.0) };
            images.extend((0..npix).map(|_| rng.gen_range(lo..hi)));
        }
        Dataset { images, labels, shape: (1, 4, 4), classes: 2, provenance: Provenance::Clean }
    }

    fn blob_config() -> TrainConfig {
        let mut cfg = TrainConfig::new(ModelSpec {
            arch: Arch::Mlp,
            input_shape: (1, 4, 4),
            classes: 2,
            seed: 1,
            activation: Activation::Gelu,
        });
        cfg.epochs = 10;
        cfg.batch_size = 8;
        cfg.lr = 0.1;
        cfg.recipe = RecipeId::None;
        cfg
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let train_set = blob_dataset(64, 1);
        let val_set = blob_dataset(32, 2);
        let (_, report) = train(&train_set, &val_set, &blob_config()).unwrap();
        assert!(report.final_val_accuracy >= 0.95, "accuracy {}", report.final_val_accuracy);
    }

    #[test]
    fn one_epoch_runs_ceil_n_over_batch_steps() {
        let train_set = blob_dataset(50, 1);
        let val_set = blob_dataset(10, 2);
        let mut cfg = blob_config();
        cfg.epochs = 1;
        cfg.batch_size = 8;
        let (_, report) = train(&train_set, &val_set, &cfg).unwrap();
        assert_eq!(report.steps_run, 7); // ceil(50/8)
        cfg.epochs = 0;
        assert!(train(&train_set, &val_set, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let train_set = blob_dataset(40, 1);
        let val_set = blob_dataset(10, 2);
        let mut cfg = blob_config();
        cfg.epochs = 3;
        cfg.recipe = RecipeId::Simple;
        let (m1, r1) = train(&train_set, &val_set, &cfg).unwrap();
        let (m2, r2) = train(&train_set, &val_set, &cfg).unwrap();
        let bits = |m: &Model| -> Vec<u64> { m.flatten().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&m1), bits(&m2));
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        cfg.seed = 99;
        let (m3, _) = train(&train_set, &val_set, &cfg).unwrap();
        assert_ne!(bits(&m1), bits(&m3));
    }

    #[test]
    fn divergence_reports_epoch() {
        let train_set = blob_dataset(16, 1);
        let val_set = blob_dataset(8, 2);
        let mut cfg = blob_config();
        cfg.lr = 1e18;
        cfg.epochs = 3;
        match train(&train_set, &val_set, &cfg) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("diverged at epoch"), "{msg}"),
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn mix_gates_run_and_stay_deterministic() {
        let train_set = blob_dataset(32, 1);
        let val_set = blob_dataset(8, 2);
        let mut cfg = blob_config();
        cfg.epochs = 2;
        cfg.mixup_prob = 0.5;
        cfg.cutmix_prob = 0.5;
        let (m1, _) = train(&train_set, &val_set, &cfg).unwrap();
        let (m2, _) = train(&train_set, &val_set, &cfg).unwrap();
        assert_eq!(m1.flatten(), m2.flatten());
    }

    #[test]
    fn constant_model_scores_inverse_class_count() {
        let val_set = blob_dataset(40, 2); // balanced 2-class
        let mut model = Model::init(blob_config().spec).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.unflatten(&zeros).unwrap();
        assert_eq!(evaluate(&model, &val_set).unwrap(), 0.5);
    }

    #[test]
    fn relabeled_valset_scores_perfectly() {
        // label the valset with the model's own predictions: accuracy 1.0
        let mut val_set = blob_dataset(20, 2);
        let model = Model::init(blob_config().spec).unwrap();
        for i in 0..val_set.len() {
            val_set.labels[i] = models::predict_topk(&model, val_set.image(i), 1).unwrap()[0];
        }
        assert_eq!(evaluate(&model, &val_set).unwrap(), 1.0);
    }

    #[test]
    fn empty_valset_errors() {
        let model = Model::init(blob_config().spec).unwrap();
        let empty = Dataset {
            images: vec![],
            labels: vec![],
            shape: (1, 4, 4),
            classes: 2,
            provenance: Provenance::Clean,
        };
        assert!(evaluate(&model, &empty).is_err());
    }
}
