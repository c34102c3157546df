//! Synthesize a small labeled image dataset and train a classifier on it
//! with the built-in momentum-SGD trainer (warmup + cosine schedule).

use anyhow::Result;
use taggant::data;
use taggant::models::{Activation, Arch, ModelSpec};
use taggant::trainer::{train, TrainConfig};

fn main() -> Result<()> {
    let shape = (3, 16, 16);
    let classes = 6;
    let train_set = data::synthesize(600, shape, classes, 42)?;
    let val_set = data::synthesize(200, shape, classes, 43)?;
    println!("train {} images, val {} images, {} classes", train_set.len(), val_set.len(), classes);

    let mut cfg = TrainConfig::new(ModelSpec {
        arch: Arch::CnnSmall,
        input_shape: shape,
        classes,
        seed: 7,
        activation: Activation::Gelu,
    });
    cfg.epochs = 6;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.seed = 7;

    let (model, report) = train(&train_set, &val_set, &cfg)?;
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {e}: mean loss {loss:.4}");
    }
    println!("final val accuracy: {:.3} (chance = {:.3})", report.final_val_accuracy, 1.0 / classes as f64);
    println!("parameters: {}", model.param_count());
    Ok(())
}
