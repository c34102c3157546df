//! How visible is a signature to someone hunting for it? Two measures:
//! per-image PSNR (distortion) and a k-NN outlier sweep in a model's
//! feature space (discoverability). A good signature keeps PSNR high and
//! its images no more flaggable than chance.

use anyhow::Result;
use taggant::data;
use taggant::keys::generate_keys;
use taggant::models::{Activation, Arch, ModelSpec};
use taggant::signer::{apply_signature, craft_signature, select_signing_set, CraftConfig};
use taggant::stealth::stealth_report;
use taggant::trainer::{train, TrainConfig};

fn main() -> Result<()> {
    let shape = (3, 16, 16);
    let classes = 6;
    let train_set = data::synthesize(400, shape, classes, 1)?;
    let val_set = data::synthesize(120, shape, classes, 2)?;

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
    let (model, _) = train(&train_set, &val_set, &tcfg)?;

    let keyset = generate_keys(5, shape, classes, 99)?;
    let mut ccfg = CraftConfig::new(16.0 / 255.0);
    ccfg.steps = 40;
    ccfg.restarts = 2;
    let plan = select_signing_set(&train_set, &keyset, 0.05, 5)?;
    let sig = craft_signature(&model, &keyset, &train_set, &plan, &ccfg)?;
    let signed = apply_signature(&train_set, &sig)?;

    // An auditor flags the top 2% most feature-space-isolated images.
    let top_n = (signed.len() / 50).max(1);
    let report = stealth_report(&train_set, &signed, &model, &sig.signed_indices(), 10, top_n)?;
    println!("signed images: {}", sig.signed_indices().len());
    println!("PSNR over signed images: mean {:.2} dB, min {:.2} dB", report.mean_psnr_db, report.min_psnr_db);
    println!(
        "k-NN audit (k={}, top {}): caught {:.1}% of signed images; chance would catch {:.1}%",
        report.k_nn,
        report.top_n,
        100.0 * report.detection_rate,
        100.0 * report.base_rate
    );
    Ok(())
}
