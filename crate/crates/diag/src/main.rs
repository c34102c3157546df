use anyhow::Result;
use taggant::augment::RecipeId;
use taggant::data;
use taggant::experiment::filter_signature;
use taggant::keys;
use taggant::models::{self, LossKind, Model};
use taggant::signer::{self, CraftConfig};

fn light_cfg() -> CraftConfig {
    let mut cfg = CraftConfig::new(16.0 / 255.0);
    cfg.lambda = 0.01;
    cfg.repeats = 2;
    cfg.restarts = 2;
    cfg.steps = 200;
    cfg.step_size = 0.1 * cfg.eps;
    cfg.recipe = RecipeId::Simple;
    cfg.loss = LossKind::Ce;
    cfg.seed = 5;
    cfg
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode = args[1].as_str();
    let ckpt = &args[2];
    let out = &args[3]; // signed dataset dir; kept keys written to {out}-keys.json
    let ds = data::load_dataset(std::path::Path::new("/tmp/probe2/ds/train"))?;
    let ks20 = keys::generate_keys(20, ds.shape, ds.classes, 99)?;
    let model: Model = models::load_checkpoint(std::path::Path::new(ckpt))?;
    let cfg = light_cfg();
    let t0 = std::time::Instant::now();

    if mode == "e" {
        let out = args.last().unwrap();
        let ks = keys::load_keyset(std::path::Path::new("/tmp/probe2/keys.json"))?;
        let surrogates: Vec<Model> = args[2..args.len() - 1]
            .iter()
            .map(|p| models::load_checkpoint(std::path::Path::new(p)))
            .collect::<taggant::Result<_>>()?;
        let refs: Vec<&Model> = surrogates.iter().collect();
        let plan = signer::select_signing_set(&ds, &ks, 0.05, cfg.seed)?;
        let sig = signer::craft_signature_ensemble(&refs, &ks, &ds, &plan, &cfg)?;
        eprintln!("craft took {:.0}s; scores {:?}", t0.elapsed().as_secs_f64(), sig.key_scores);
        let signed = signer::apply_signature(&ds, &sig)?;
        data::save_dataset(&signed, std::path::Path::new(out))?;
        return Ok(());
    }

    let (kept, sig) = match mode {
        // craft all 20 at 5 images each, keep the 10 best post hoc
        "a" => {
            let plan = signer::select_signing_set(&ds, &ks20, 0.05, cfg.seed)?;
            let sig = signer::craft_signature(&model, &ks20, &ds, &plan, &cfg)?;
            filter_signature(&ks20, &sig, 10)?
        }
        // cheap scoring pass, keep 10, recraft with the full budget
        "b" => {
            let mut score_cfg = cfg.clone();
            score_cfg.steps = 60;
            score_cfg.restarts = 1;
            let plan = signer::select_signing_set(&ds, &ks20, 0.05, cfg.seed)?;
            let scored = signer::craft_signature(&model, &ks20, &ds, &plan, &score_cfg)?;
            let (kept, _) = filter_signature(&ks20, &scored, 10)?;
            eprintln!("score pass took {:.0}s", t0.elapsed().as_secs_f64());
            let plan2 = signer::select_signing_set(&ds, &kept, 0.05, cfg.seed)?;
            let sig = signer::craft_signature(&model, &kept, &ds, &plan2, &cfg)?;
            (kept, sig)
        }
        other => anyhow::bail!("unknown mode {other}"),
    };
    eprintln!(
        "total craft {:.0}s; kept scores {:?}",
        t0.elapsed().as_secs_f64(),
        sig.key_scores
    );
    let signed = signer::apply_signature(&ds, &sig)?;
    data::save_dataset(&signed, std::path::Path::new(out))?;
    keys::save_keyset(&kept, std::path::Path::new(&format!("{out}-keys.json")))?;
    Ok(())
}
