//! Alice's side of the protocol: generate secret out-of-distribution keys,
//! pick a budgeted signing set, and craft clean-label perturbations whose
//! training gradients line up with the keys' gradients. Labels are never
//! changed and every pixel stays within the L-infinity budget.

use anyhow::Result;
use taggant::data;
use taggant::keys::generate_keys;
use taggant::models::{Activation, Arch, ModelSpec};
use taggant::signer::{apply_signature, craft_signature, select_signing_set, CraftConfig};
use taggant::stealth::psnr;
use taggant::trainer::{train, TrainConfig};

fn main() -> Result<()> {
    let shape = (3, 16, 16);
    let classes = 6;
    let train_set = data::synthesize(400, shape, classes, 1)?;
    let val_set = data::synthesize(120, shape, classes, 2)?;

    // A surrogate model for gradient matching; any clean-trained model of
    // the suspect family works.
    let mut tcfg = TrainConfig::new(ModelSpec {
        arch: Arch::CnnSmall,
        input_shape: shape,
        classes,
        seed: 3,
        activation: Activation::Gelu,
    });
    tcfg.epochs = 3;
    tcfg.lr = 0.05;
    tcfg.seed = 3;
    let (surrogate, _) = train(&train_set, &val_set, &tcfg)?;

    // Secret keys: random-pixel images with independently random labels.
    let keyset = generate_keys(5, shape, classes, 99)?;

    // Sign 4% of the dataset at eps = 16/255.
    let mut cfg = CraftConfig::new(16.0 / 255.0);
    cfg.steps = 40;
    cfg.restarts = 2;
    cfg.seed = 5;
    let plan = select_signing_set(&train_set, &keyset, 0.04, 5)?;
    println!("signing {} of {} images ({} per key)", plan.total, train_set.len(), plan.per_key[0].len());

    let sig = craft_signature(&surrogate, &keyset, &train_set, &plan, &cfg)?;
    for (i, score) in sig.key_scores.iter().enumerate() {
        println!("key {i}: objective {score:+.4} (lower = better aligned)");
    }

    let signed = apply_signature(&train_set, &sig)?;

    // Invariants anyone can check: same labels, bounded pixel change.
    assert_eq!(signed.labels, train_set.labels);
    let mut max_delta = 0.0f64;
    for i in 0..train_set.len() {
        for (a, b) in train_set.image(i).iter().zip(signed.image(i)) {
            max_delta = max_delta.max((a - b).abs());
            assert!((0.0..=1.0).contains(b));
        }
    }
    println!("max pixel change {:.5} (budget {:.5})", max_delta, cfg.eps);

    let idx = sig.signed_indices();
    let mut worst = f64::INFINITY;
    for &i in &idx {
        worst = worst.min(psnr(train_set.image(i), signed.image(i), 1.0)?);
    }
    println!("worst signed-image PSNR {:.2} dB", worst);
    Ok(())
}
