//! Command-line front end. Exit codes: 0 ok, 2 config error, 3 data
//! integrity, 4 numerical failure, 5 detection-infrastructure failure.
//! Worker-pool size follows the RAYON_NUM_THREADS environment variable.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use taggant::augment::RecipeId;
use taggant::data;
use taggant::detector::{self, DetectionReport, HttpEndpoint, InProcessEndpoint, SuspectEndpoint};
use taggant::error::{Error, Result};
use taggant::experiment::{self, config_hash, ExperimentConfig};
use taggant::keys;
use taggant::models::{self, Activation, Arch, ModelSpec};
use taggant::signer::{self, CraftConfig};
use taggant::stealth;
use taggant::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "taggant", about = "Sign image datasets with secret-keyed taggants and detect models trained on them", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

impl ShapeArgs {
    fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (train + val splits)
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train_n: usize,
        #[arg(long, default_value_t = 1000)]
        val_n: usize,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate secret keys (refuses dataset output directories)
    GenKeys {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Craft and apply a taggant signature to a dataset
    Sign {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        /// Alice's surrogate checkpoint
        #[arg(long)]
        model: PathBuf,
        /// Craft config JSON file; flags below override its fields
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.02)]
        budget: f64,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Signed dataset output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        signature: PathBuf,
        /// Optional: write the keyset back with crafting scores attached
        #[arg(long)]
        scored_keys: Option<PathBuf>,
    },
    /// Train a model on a dataset directory
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Train config JSON file; flags below override its fields
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_arch)]
        arch: Option<Arch>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_parser = parse_recipe)]
        recipe: Option<RecipeId>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Probe suspect models with the keyset and test the null hypothesis
    Detect {
        #[arg(long)]
        keys: PathBuf,
        /// Checkpoint files, one per independent training run
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Remote endpoints (host:port speaking POST /predict)
        #[arg(long = "endpoint")]
        endpoints: Vec<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 10)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 2)]
        retries: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure stealth: PSNR and k-NN outlier discoverability
    Stealth {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        signed: PathBuf,
        /// Feature extractor checkpoint (a clean-trained model)
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        signature: PathBuf,
        #[arg(long, default_value_t = 10)]
        knn: usize,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Export the top-n flagged images as PGM files for inspection
        #[arg(long)]
        export_top: Option<PathBuf>,
    },
    /// Run the full comparison protocol from a config file
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    match s {
        "mlp" => Ok(Arch::Mlp),
        "cnn-small" => Ok(Arch::CnnSmall),
        "cnn-medium" => Ok(Arch::CnnMedium),
        other => Err(format!("unknown arch '{other}' (mlp|cnn-small|cnn-medium)")),
    }
}

fn parse_recipe(s: &str) -> std::result::Result<RecipeId, String> {
    match s {
        "none" => Ok(RecipeId::None),
        "simple" => Ok(RecipeId::Simple),
        "strong" => Ok(RecipeId::Strong),
        other => Err(format!("unknown recipe '{other}' (none|simple|strong)")),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_report<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Report wrapper: every emitted artifact names the config that made it.
#[derive(Serialize)]
struct Stamped<C: Serialize, R: Serialize> {
    config_sha256: String,
    config: C,
    report: R,
}

fn stamped<C: Serialize, R: Serialize>(config: C, report: R) -> Result<Stamped<C, R>> {
    Ok(Stamped { config_sha256: config_hash(&config)?, config, report })
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::MakeDataset { out, train_n, val_n, classes, shape, seed } => {
            let train = data::synthesize(train_n, shape.shape(), classes, seed)?;
            let val = data::synthesize(val_n, shape.shape(), classes, seed.wrapping_add(1))?;
            data::save_dataset(&train, &out.join("train"))?;
            data::save_dataset(&val, &out.join("val"))?;
            println!("wrote {train_n} train + {val_n} val images to {}", out.display());
        }
        Command::GenKeys { out, count, classes, shape, seed } => {
            let ks = keys::generate_keys(count, shape.shape(), classes, seed)?;
            keys::save_keyset(&ks, &out)?;
            println!("wrote {count} keys to {}", out.display());
        }
        Command::Sign {
            dataset, keys: keys_path, model, config, budget,
            eps, lambda, steps, restarts, seed, out, signature, scored_keys,
        } => {
            let ds = data::load_dataset(&dataset)?;
            let ks = keys::load_keyset(&keys_path)?;
            let surrogate = models::load_checkpoint(&model)?;
            let mut cfg: CraftConfig = match config {
                Some(p) => read_json(&p)?,
                None => CraftConfig::new(16.0 / 255.0),
            };
            if let Some(v) = eps {
                cfg.eps = v;
                cfg.step_size = 0.1 * v;
            }
            if let Some(v) = lambda {
                cfg.lambda = v;
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = restarts {
                cfg.restarts = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let plan = signer::select_signing_set(&ds, &ks, budget, cfg.seed)?;
            let sig = signer::craft_signature(&surrogate, &ks, &ds, &plan, &cfg)?;
            signer::save_signature(&sig, &signature)?;
            let signed = signer::apply_signature(&ds, &sig)?;
            data::save_dataset(&signed, &out)?;
            if let Some(p) = scored_keys {
                let mut scored = ks.clone();
                for (k, &s) in scored.keys.iter_mut().zip(&sig.key_scores) {
                    k.score = Some(s);
                }
                keys::save_keyset(&scored, &p)?;
            }
            println!(
                "signed {} images across {} keys (config {})",
                sig.plan.total,
                ks.len(),
                &config_hash(&cfg)?[..12]
            );
        }
        Command::Train { dataset, val, config, arch, epochs, batch_size, lr, recipe, seed, out, report } => {
            let train_set = data::load_dataset(&dataset)?;
            let val_set = data::load_dataset(&val)?;
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::new(ModelSpec {
                    arch: Arch::CnnSmall,
                    input_shape: train_set.shape,
                    classes: train_set.classes,
                    seed: 0,
                    activation: Activation::Gelu,
                }),
            };
            if let Some(a) = arch {
                cfg.spec.arch = a;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(r) = recipe {
                cfg.recipe = r;
            }
            if let Some(v) = seed {
                cfg.seed = v;
                cfg.spec.seed = v;
            }
            let (model, train_report) = trainer::train(&train_set, &val_set, &cfg)?;
            models::save_checkpoint(&model, &out)?;
            println!("val accuracy {:.4}; checkpoint {}", train_report.final_val_accuracy, out.display());
            write_report(&report, &stamped(cfg, train_report)?)?;
        }
        Command::Detect { keys: keys_path, models: model_paths, endpoints, k, alpha, timeout_secs, retries, report } => {
            let ks = keys::load_keyset(&keys_path)?;
            if model_paths.is_empty() && endpoints.is_empty() {
                return Err(Error::Config("detect needs at least one --model or --endpoint".into()));
            }
            let mut owned: Vec<Box<dyn SuspectEndpoint>> = Vec::new();
            for p in &model_paths {
                let m = models::load_checkpoint(p)?;
                if m.spec.classes != ks.classes {
                    return Err(Error::Config(format!(
                        "model {} has {} classes, keyset has {}",
                        p.display(),
                        m.spec.classes,
                        ks.classes
                    )));
                }
                owned.push(Box::new(InProcessEndpoint::new(m)));
            }
            for addr in &endpoints {
                let mut ep = HttpEndpoint::new(addr, ks.classes, ks.classes);
                ep.timeout = Duration::from_secs(timeout_secs);
                ep.retries = retries;
                owned.push(Box::new(ep));
            }
            let refs: Vec<&dyn SuspectEndpoint> = owned.iter().map(|b| b.as_ref()).collect();
            let det: DetectionReport = detector::detect(&refs, &ks, k, alpha)?;
            println!(
                "hits {:?}; fisher log10 p = {:.2}; {} H0 at alpha={alpha}",
                det.runs.iter().map(|r| r.hits).collect::<Vec<_>>(),
                det.fisher_log10_p,
                if det.reject_null { "REJECT" } else { "accept" },
            );
            #[derive(Serialize)]
            struct DetectConfig {
                k: usize,
                alpha: f64,
                runs: usize,
            }
            write_report(&report, &stamped(DetectConfig { k, alpha, runs: refs.len() }, det)?)?;
        }
        Command::Stealth { original, signed, model, signature, knn, top_n, report, export_top } => {
            let orig = data::load_dataset(&original)?;
            let sgn = data::load_dataset(&signed)?;
            let extractor = models::load_checkpoint(&model)?;
            let sig = signer::load_signature(&signature, orig.pixels_per_image())?;
            let indices = sig.signed_indices();
            let top_n = top_n.unwrap_or_else(|| (sgn.len() / 50).max(1)); // default top 2%
            let rep = stealth::stealth_report(&orig, &sgn, &extractor, &indices, knn, top_n)?;
            println!(
                "mean psnr {:.2} dB; detection rate {:.4} (base {:.4})",
                rep.mean_psnr_db, rep.detection_rate, rep.base_rate
            );
            if let Some(dir) = &export_top {
                export_flagged(&sgn, &rep.outlier_scores, top_n, dir)?;
            }
            #[derive(Serialize)]
            struct StealthConfig {
                knn: usize,
                top_n: usize,
            }
            write_report(&report, &stamped(StealthConfig { knn, top_n }, rep)?)?;
        }
        Command::Experiment { config, out } => {
            let cfg: ExperimentConfig = read_json(&config)?;
            let rep = experiment::run_experiment(&cfg, &out)?;
            print!("{}", experiment::render_table(&rep));
        }
    }
    Ok(())
}

/// Write the top-n scored images as 8-bit PGM (channel-averaged) for
/// human inspection; no image codec dependency needed.
fn export_flagged(ds: &data::Dataset, scores: &[f64], top_n: usize, dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let (c, h, w) = ds.shape;
    for (rank, &i) in order.iter().take(top_n).enumerate() {
        let img = ds.image(i);
        let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
        for row in 0..h {
            for col in 0..w {
                let mean: f64 = (0..c).map(|ch| img[(ch * h + row) * w + col]).sum::<f64>() / c as f64;
                pgm.push((mean * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        std::fs::write(dir.join(format!("flagged-{rank:03}-index-{i}.pgm")), pgm)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
