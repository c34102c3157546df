//! The whole protocol as one reproducible run: synthesize data, train
//! Alice's surrogate, craft signatures, train several of Bob's models per
//! method (clean control, taggants, plus label-flipping and blending
//! baselines), probe each, and print a comparison table. Reruns are
//! byte-identical and interrupted runs resume from cached cells.

use anyhow::Result;
use taggant::augment::RecipeId;
use taggant::experiment::{run_experiment, ExperimentConfig, KeyParams, Method, SyntheticParams};
use taggant::models::{Activation, Arch, LossKind, ModelSpec};
use taggant::signer::CraftConfig;
use taggant::trainer::TrainConfig;

fn main() -> Result<()> {
    let shape = (3, 16, 16);
    let classes = 8;
    let spec = ModelSpec {
        arch: Arch::CnnSmall,
        input_shape: shape,
        classes,
        seed: 0,
        activation: Activation::Gelu,
    };
    let train = TrainConfig {
        spec: spec.clone(),
        epochs: 5,
        batch_size: 32,
        lr: 0.05,
        warmup_epochs: 1,
        weight_decay: 0.0,
        momentum: 0.9,
        loss: LossKind::Ce,
        recipe: RecipeId::None,
        seed: 0,
        mixup_prob: 0.0,
        cutmix_prob: 0.0,
    };
    let mut craft = CraftConfig::new(16.0 / 255.0);
    craft.steps = 50;
    craft.restarts = 2;

    let cfg = ExperimentConfig {
        synthetic: SyntheticParams { train_n: 600, val_n: 150, shape, classes, seed: 11 },
        keys: KeyParams { generate: 8, keep: 6, seed: 12 },
        budget: 0.04,
        plan_seed: 13,
        alice_train: TrainConfig { seed: 14, spec: ModelSpec { seed: 14, ..spec }, ..train.clone() },
        craft,
        bob_train: train,
        bob_seeds: vec![1, 2],
        detect_k: 2,
        alpha: 0.01,
        gamma: 0.2,
        methods: vec![Method::Clean, Method::Taggants, Method::Canary, Method::Transparency],
    };

    let out = std::env::temp_dir().join("taggant-example-experiment");
    let report = run_experiment(&cfg, &out)?;
    print!("{}", taggant::experiment::render_table(&report));
    println!("artifacts under {}", out.display());
    Ok(())
}
