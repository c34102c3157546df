//! End-to-end experiment runner: build a synthetic dataset, train Alice's
//! surrogate, craft and select keys, produce one training dataset per
//! method (clean / taggants / naive canary / transparency / test-image
//! keys), train Bob's models over several seeds, and run detection.
//!
//! Every artifact embeds the hash of the config that produced it, cells
//! (method x Bob seed) are persisted individually for resumability, and
//! reruns with the same config are byte-identical.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::detector;
use crate::error::{Error, Result};
use crate::keys::{self, KeySet};
use crate::models::{self, hex_digest};
use crate::signer::{self, CraftConfig, Signature, SigningPlan};
use crate::stealth;
use crate::trainer::{self, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Clean,
    Taggants,
    Canary,
    Transparency,
    TestImageKeys,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Clean => "clean",
            Method::Taggants => "taggants",
            Method::Canary => "canary",
            Method::Transparency => "transparency",
            Method::TestImageKeys => "test-image-keys",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub train_n: usize,
    pub val_n: usize,
    pub shape: (usize, usize, usize),
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyParams {
    /// How many candidate keys to generate...
    pub generate: usize,
    /// ...and how many to keep after scoring by the crafting objective.
    pub keep: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticParams,
    pub keys: KeyParams,
    pub budget: f64,
    pub plan_seed: u64,
    pub alice_train: TrainConfig,
    pub craft: CraftConfig,
    /// Template for Bob's runs; its seed field is replaced per run.
    pub bob_train: TrainConfig,
    pub bob_seeds: Vec<u64>,
    pub detect_k: usize,
    pub alpha: f64,
    /// Transparency blend weight.
    pub gamma: f64,
    pub methods: Vec<Method>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.alice_train.validate()?;
        self.craft.validate()?;
        self.bob_train.validate()?;
        if self.bob_seeds.is_empty() {
            return Err(Error::Config("need at least one Bob seed".into()));
        }
        if self.keys.keep == 0 || self.keys.keep > self.keys.generate {
            return Err(Error::Config(format!(
                "keep {} must be in 1..={} generated keys",
                self.keys.keep, self.keys.generate
            )));
        }
        if self.detect_k == 0 || self.detect_k >= self.synthetic.classes {
            return Err(Error::Config("detect_k must satisfy 1 <= k < |Y|".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config("alpha must be in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must be in [0,1]".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        Ok(())
    }
}

/// Hash of the canonical JSON form; embedded in every artifact.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(hex_digest(serde_json::to_string(cfg)?.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub config_sha256: String,
    pub method: Method,
    pub bob_seed: u64,
    pub val_accuracy: f64,
    pub hits_top1: usize,
    pub hits_topk: usize,
    pub responses_topk: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub method: Method,
    pub val_accuracies: Vec<f64>,
    pub val_acc_mean: f64,
    pub val_acc_std: f64,
    /// None for the clean row (no keys were embedded).
    pub top1_key_accuracy: Option<f64>,
    pub topk_key_accuracy: Option<f64>,
    pub per_run_log10_p: Vec<f64>,
    pub fisher_log10_p: f64,
    pub reject_null: bool,
    /// Over images the method actually modified; None when none were.
    pub mean_psnr_db: Option<f64>,
    pub min_psnr_db: Option<f64>,
    pub modified_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_sha256: String,
    pub keys_kept: usize,
    pub detect_k: usize,
    pub alpha: AlphaMicros,
    pub rows: Vec<RowReport>,
}

/// Alpha stored as an exact rational (numerator over 10^6) so report JSON
/// never depends on float formatting of user input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaMicros {
    pub micro: u64,
}

impl AlphaMicros {
    fn from_f64(a: f64) -> Self {
        AlphaMicros { micro: (a * 1e6).round() as u64 }
    }
    pub fn as_f64(&self) -> f64 {
        self.micro as f64 / 1e6
    }
}

/// Keys drawn from validation images (Table-2-style baseline): the image
/// stream is replaced by real held-out images while labels stay uniform
/// and independent, preserving the detection null.
pub fn test_image_keyset(valset: &Dataset, count: usize, seed: u64) -> Result<KeySet> {
    let mut ks = keys::generate_keys(count, valset.shape, valset.classes, seed)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    pick.set_stream(3);
    for key in &mut ks.keys {
        let j = pick.gen_range(0..valset.len());
        key.image = valset.image(j).to_vec();
    }
    Ok(ks)
}

/// Drop all but the `keep` best-scoring keys from a crafted signature,
/// returning the kept keyset and the filtered signature. Losing keys'
/// images simply stay unperturbed.
pub fn filter_signature(keyset: &KeySet, sig: &Signature, keep: usize) -> Result<(KeySet, Signature)> {
    if keep > keyset.len() || sig.key_scores.len() != keyset.len() {
        return Err(Error::Config("filter_signature: keep/score arity mismatch".into()));
    }
    let mut order: Vec<usize> = (0..keyset.len()).collect();
    order.sort_by(|&a, &b| {
        sig.key_scores[a]
            .partial_cmp(&sig.key_scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();

    let mut kept = keyset.clone();
    kept.keys = chosen
        .iter()
        .map(|&i| {
            let mut k = keyset.keys[i].clone();
            k.score = Some(sig.key_scores[i]);
            k
        })
        .collect();
    let per_key: Vec<Vec<usize>> = chosen.iter().map(|&i| sig.plan.per_key[i].clone()).collect();
    let total = per_key.iter().map(Vec::len).sum();
    let filtered = Signature {
        eps: sig.eps,
        plan: SigningPlan { budget: sig.plan.budget, total, per_key },
        config: sig.config.clone(),
        key_scores: chosen.iter().map(|&i| sig.key_scores[i]).collect(),
        deltas: chosen.iter().map(|&i| sig.deltas[i].clone()).collect(),
    };
    Ok((kept, filtered))
}

fn write_if_absent(path: &Path, bytes: &[u8]) -> Result<()> {
    if !path.exists() {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

fn modified_indices(clean: &Dataset, modified: &Dataset) -> Vec<usize> {
    (0..clean.len())
        .filter(|&i| clean.image(i) != modified.image(i))
        .collect()
}

struct SigningBundle {
    kept_keys: KeySet,
    signature: Signature,
    signed: Dataset,
}

fn build_signing_bundle(
    cfg: &ExperimentConfig,
    alice: &models::Model,
    train_set: &Dataset,
    keyset: &KeySet,
) -> Result<SigningBundle> {
    let plan = signer::select_signing_set(train_set, keyset, cfg.budget, cfg.plan_seed)?;
    let sig = signer::craft_signature(alice, keyset, train_set, &plan, &cfg.craft)?;
    let (kept_keys, filtered) = filter_signature(keyset, &sig, cfg.keys.keep)?;
    let signed = signer::apply_signature(train_set, &filtered)?;
    Ok(SigningBundle { kept_keys, signature: filtered, signed })
}

fn run_cell(
    cfg: &ExperimentConfig,
    hash: &str,
    method: Method,
    bob_seed: u64,
    train_set: &Dataset,
    val_set: &Dataset,
    detection_keys: &KeySet,
    cell_path: &Path,
) -> Result<CellRecord> {
    if cell_path.exists() {
        let cell: CellRecord = serde_json::from_slice(&std::fs::read(cell_path)?)
            .map_err(|e| Error::Integrity(format!("cell parse failure: {e}")))?;
        if cell.config_sha256 != hash || cell.method != method || cell.bob_seed != bob_seed {
            return Err(Error::Integrity(format!(
                "stale cell {} does not match current config",
                cell_path.display()
            )));
        }
        return Ok(cell);
    }
    let mut tc = cfg.bob_train.clone();
    tc.seed = bob_seed;
    let (model, report) = trainer::train(train_set, val_set, &tc)?;
    let endpoint = detector::InProcessEndpoint::new(model);
    let (hits_top1, _) = detector::probe(&endpoint, detection_keys, 1)?;
    let (hits_topk, responses_topk) = detector::probe(&endpoint, detection_keys, cfg.detect_k)?;
    let cell = CellRecord {
        config_sha256: hash.to_string(),
        method,
        bob_seed,
        val_accuracy: report.final_val_accuracy,
        hits_top1,
        hits_topk,
        responses_topk,
    };
    std::fs::write(cell_path, serde_json::to_vec_pretty(&cell)?)?;
    Ok(cell)
}

fn summarize_row(
    cfg: &ExperimentConfig,
    method: Method,
    cells: &[CellRecord],
    keys_count: usize,
    clean_train: &Dataset,
    method_train: &Dataset,
) -> Result<RowReport> {
    let accs: Vec<f64> = cells.iter().map(|c| c.val_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;

    let mut ln_ps = Vec::with_capacity(cells.len());
    let mut ln_midps = Vec::with_capacity(cells.len());
    for c in cells {
        ln_ps.push(detector::binomial_log_pvalue(c.hits_topk, keys_count, cfg.detect_k, cfg.synthetic.classes)?);
        ln_midps.push(detector::binomial_log_midp(c.hits_topk, keys_count, cfg.detect_k, cfg.synthetic.classes)?);
    }
    let fisher_log10_p = detector::fisher_combine(&ln_ps)?;
    let decision_log10_p = detector::fisher_combine(&ln_midps)?;

    let modified = modified_indices(clean_train, method_train);
    let (mean_psnr_db, min_psnr_db) = if modified.is_empty() {
        (None, None)
    } else {
        let psnrs: Vec<f64> = modified
            .iter()
            .map(|&i| stealth::psnr(clean_train.image(i), method_train.image(i), 1.0))
            .collect::<Result<_>>()?;
        (
            Some(psnrs.iter().sum::<f64>() / psnrs.len() as f64),
            Some(psnrs.iter().cloned().fold(f64::INFINITY, f64::min)),
        )
    };

    let key_acc = |hits: &dyn Fn(&CellRecord) -> usize| -> Option<f64> {
        if method == Method::Clean {
            None // clean row carries no embedded keys: cells stay empty
        } else {
            Some(cells.iter().map(|c| hits(c) as f64 / keys_count as f64).sum::<f64>() / cells.len() as f64)
        }
    };

    Ok(RowReport {
        method,
        val_accuracies: accs,
        val_acc_mean: mean,
        val_acc_std: var.sqrt(),
        top1_key_accuracy: key_acc(&|c| c.hits_top1),
        topk_key_accuracy: key_acc(&|c| c.hits_topk),
        per_run_log10_p: ln_ps.iter().map(|lp| lp / std::f64::consts::LN_10).collect(),
        fisher_log10_p,
        reject_null: decision_log10_p < cfg.alpha.log10(),
        mean_psnr_db,
        min_psnr_db,
        modified_images: modified.len(),
    })
}

/// Run the full protocol into `out_dir`. Rerunning with the same config
/// reuses finished cells and reproduces every artifact byte-for-byte.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let hash = config_hash(cfg)?;
    let public = out_dir.join("public");
    let secret = out_dir.join("secret");
    let cells_dir = out_dir.join("cells");
    for d in [&public, &secret, &cells_dir] {
        std::fs::create_dir_all(d)?;
    }
    write_if_absent(&out_dir.join("config.json"), &serde_json::to_vec_pretty(cfg)?)?;

    // datasets: the val seed is offset so train and val never share draws
    let sp = &cfg.synthetic;
    let train_set = data::synthesize(sp.train_n, sp.shape, sp.classes, sp.seed)?;
    let val_set = data::synthesize(sp.val_n, sp.shape, sp.classes, sp.seed.wrapping_add(1))?;
    data::save_dataset(&train_set, &public.join("clean"))?;
    data::save_dataset(&val_set, &public.join("val"))?;

    // Alice's surrogate, clean-trained
    let alice_ckpt = out_dir.join("alice.ckpt");
    let alice = if alice_ckpt.exists() {
        models::load_checkpoint(&alice_ckpt)?
    } else {
        let (model, _) = trainer::train(&train_set, &val_set, &cfg.alice_train)?;
        models::save_checkpoint(&model, &alice_ckpt)?;
        model
    };

    // key generation + crafting + selection (the secret side)
    let candidates = keys::generate_keys(cfg.keys.generate, sp.shape, sp.classes, cfg.keys.seed)?;
    let bundle = build_signing_bundle(cfg, &alice, &train_set, &candidates)?;
    keys::save_keyset(&bundle.kept_keys, &secret.join("keys.json"))?;
    signer::save_signature(&bundle.signature, &secret.join("signature.json"))?;

    let test_key_bundle = if cfg.methods.contains(&Method::TestImageKeys) {
        let tk = test_image_keyset(&val_set, cfg.keys.generate, cfg.keys.seed.wrapping_add(7))?;
        let b = build_signing_bundle(cfg, &alice, &train_set, &tk)?;
        keys::save_keyset(&b.kept_keys, &secret.join("test-image-keys.json"))?;
        Some(b)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let (method_train, detection_keys): (Dataset, &KeySet) = match method {
            Method::Clean => (train_set.clone(), &bundle.kept_keys),
            Method::Taggants => (bundle.signed.clone(), &bundle.kept_keys),
            Method::Canary => (
                signer::baseline_naive_canary(&train_set, &bundle.kept_keys, cfg.budget, cfg.plan_seed)?,
                &bundle.kept_keys,
            ),
            Method::Transparency => (
                signer::baseline_transparency(&train_set, &bundle.kept_keys, &bundle.signature.plan, cfg.gamma)?,
                &bundle.kept_keys,
            ),
            Method::TestImageKeys => {
                let b = test_key_bundle.as_ref().expect("bundle built above");
                (b.signed.clone(), &b.kept_keys)
            }
        };
        data::save_dataset(&method_train, &public.join(method.as_str()))?;
        let cells: Vec<CellRecord> = cfg
            .bob_seeds
            .par_iter()
            .map(|&seed| {
                run_cell(
                    cfg,
                    &hash,
                    method,
                    seed,
                    &method_train,
                    &val_set,
                    detection_keys,
                    &cells_dir.join(format!("{}-{seed}.json", method.as_str())),
                )
            })
            .collect::<Result<_>>()?;
        rows.push(summarize_row(cfg, method, &cells, detection_keys.len(), &train_set, &method_train)?);
    }

    let report = ExperimentReport {
        config_sha256: hash,
        keys_kept: cfg.keys.keep,
        detect_k: cfg.detect_k,
        alpha: AlphaMicros::from_f64(cfg.alpha),
        rows,
    };
    std::fs::write(out_dir.join("table.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(out_dir.join("table.txt"), render_table(&report))?;
    Ok(report)
}

/// Human-readable rendering of the comparison table.
pub fn render_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "config {}  (K={}, k={}, alpha={})\n",
        &report.config_sha256[..12],
        report.keys_kept,
        report.detect_k,
        report.alpha.as_f64()
    ));
    out.push_str(&format!(
        "{:<16} {:>9} {:>9} {:>9} {:>10} {:>9} {:>7}\n",
        "method", "val acc", "top-1", "top-k", "log10 p", "psnr dB", "reject"
    ));
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<16} {:>9} {:>9} {:>9} {:>10.2} {:>9} {:>7}\n",
            row.method.as_str(),
            format!("{:.3}±{:.3}", row.val_acc_mean, row.val_acc_std),
            fmt_opt(row.top1_key_accuracy),
            fmt_opt(row.topk_key_accuracy),
            row.fisher_log10_p,
            fmt_opt(row.mean_psnr_db),
            if row.reject_null { "yes" } else { "no" },
        ));
    }
    out
}

/// Files whose bytes must reproduce across reruns with the same config.
pub fn determinism_manifest(out_dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut files = vec![
        out_dir.join("config.json"),
        out_dir.join("table.json"),
        out_dir.join("table.txt"),
        out_dir.join("alice.ckpt"),
    ];
    for sub in ["cells", "public", "secret"] {
        let dir = out_dir.join(sub);
        let mut stack = vec![dir];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&d)?.map(|e| Ok(e?.path())).collect::<Result<_>>()?;
            entries.sort();
            for p in entries {
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
    }
    files
        .into_iter()
        .map(|p| {
            let digest = hex_digest(&std::fs::read(&p)?);
            Ok((p, digest))
        })
        .collect()
}
