//! The verifier's side: probe a suspect model with the secret keys and run
//! an exact binomial test on top-k hits. Under the null (model never saw
//! the signed data) each key lands in the top k with probability k/|Y|,
//! because key labels are drawn independently of key images. Multiple
//! training runs combine via Fisher's method.

use anyhow::Result;
use taggant::data;
use taggant::detector::{detect, InProcessEndpoint, SuspectEndpoint};
use taggant::keys::generate_keys;
use taggant::models::{Activation, Arch, ModelSpec};
use taggant::signer::{apply_signature, craft_signature, select_signing_set, CraftConfig};
use taggant::trainer::{train, TrainConfig};

fn main() -> Result<()> {
    let shape = (3, 16, 16);
    let classes = 10;
    let train_set = data::synthesize(1000, shape, classes, 1)?;
    let val_set = data::synthesize(200, shape, classes, 2)?;

    let spec = ModelSpec {
        arch: Arch::CnnSmall,
        input_shape: shape,
        classes,
        seed: 0,
        activation: Activation::Gelu,
    };
    let mut tcfg = TrainConfig::new(spec);
    tcfg.epochs = 12;
    tcfg.lr = 0.05;

    // Alice signs with a surrogate trained on clean data.
    tcfg.seed = 3;
    tcfg.spec.seed = 3;
    let (surrogate, _) = train(&train_set, &val_set, &tcfg)?;
    let keyset = generate_keys(6, shape, classes, 99)?;
    let mut ccfg = CraftConfig::new(16.0 / 255.0);
    ccfg.steps = 120;
    ccfg.restarts = 3;
    let plan = select_signing_set(&train_set, &keyset, 0.08, 5)?;
    let sig = craft_signature(&surrogate, &keyset, &train_set, &plan, &ccfg)?;
    let signed = apply_signature(&train_set, &sig)?;

    // Bob trains from scratch — once on the signed data, once on clean.
    tcfg.seed = 11;
    tcfg.spec.seed = 11;
    let (bob_signed, r1) = train(&signed, &val_set, &tcfg)?;
    let (bob_clean, r2) = train(&train_set, &val_set, &tcfg)?;
    println!("bob on signed data: val acc {:.3}", r1.final_val_accuracy);
    println!("bob on clean data:  val acc {:.3}", r2.final_val_accuracy);

    // Detection is black-box: K queries, top-k labels back, nothing else.
    let k = 3;
    for (name, model) in [("signed-trained", bob_signed), ("clean-trained", bob_clean)] {
        let ep = InProcessEndpoint::new(model);
        let refs: Vec<&dyn SuspectEndpoint> = vec![&ep];
        let report = detect(&refs, &keyset, k, 0.01)?;
        println!(
            "{name}: {}/{} keys hit in top-{k}, log10 p = {:.2}, verdict: {}",
            report.runs[0].hits,
            keyset.len(),
            report.fisher_log10_p,
            if report.reject_null { "trained on signed data" } else { "no evidence" },
        );
    }
    Ok(())
}
