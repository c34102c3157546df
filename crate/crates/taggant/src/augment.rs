//! Data augmentations, in two flavors sharing one sampled-transform type:
//! a differentiable pipeline used inside the crafting objective and exact
//! discrete variants used during training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{self, LossKind, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeId {
    #[default]
    None,
    Simple,
    Strong,
}

/// Distribution over transforms. `simple` is flip + shifted crop; `strong`
/// adds jitter, blur, grayscale and solarize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecipe {
    pub id: RecipeId,
    pub flip_prob: f64,
    pub crop_pad: f64,
    pub jitter_strength: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub grayscale_prob: f64,
    pub solarize_prob: f64,
}

impl AugmentRecipe {
    pub fn none() -> Self {
        AugmentRecipe {
            id: RecipeId::None,
            flip_prob: 0.0,
            crop_pad: 0.0,
            jitter_strength: 0.0,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            grayscale_prob: 0.0,
            solarize_prob: 0.0,
        }
    }

    pub fn simple() -> Self {
        AugmentRecipe {
            id: RecipeId::Simple,
            flip_prob: 0.5,
            crop_pad: 3.0,
            ..AugmentRecipe::none()
        }
    }

    pub fn strong() -> Self {
        AugmentRecipe {
            id: RecipeId::Strong,
            flip_prob: 0.5,
            crop_pad: 3.0,
            jitter_strength: 0.4,
            blur_prob: 0.3,
            blur_sigma_max: 1.0,
            grayscale_prob: 0.2,
            solarize_prob: 0.2,
        }
    }

    pub fn from_id(id: RecipeId) -> Self {
        match id {
            RecipeId::None => Self::none(),
            RecipeId::Simple => Self::simple(),
            RecipeId::Strong => Self::strong(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("solarize_prob", self.solarize_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0,1]")));
            }
        }
        if self.crop_pad < 0.0 || self.blur_sigma_max < 0.0 || self.jitter_strength < 0.0 {
            return Err(Error::Config("negative augmentation range".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.flip_prob == 0.0
            && self.crop_pad == 0.0
            && self.jitter_strength == 0.0
            && self.blur_prob == 0.0
            && self.grayscale_prob == 0.0
            && self.solarize_prob == 0.0
    }
}

/// A fully drawn transform: applying it twice to the same image gives
/// identical output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTransform {
    pub recipe: RecipeId,
    pub flip: bool,
    pub dx: f64,
    pub dy: f64,
    /// Per-channel (RGB) affine jitter; empty means none.
    pub jitter_scale: Vec<f64>,
    pub jitter_bias: Vec<f64>,
    pub blur_sigma: f64,
    pub grayscale: bool,
    pub solarize: bool,
    pub solarize_threshold: f64,
}

impl SampledTransform {
    pub fn identity(recipe: RecipeId) -> Self {
        SampledTransform {
            recipe,
            flip: false,
            dx: 0.0,
            dy: 0.0,
            jitter_scale: vec![],
            jitter_bias: vec![],
            blur_sigma: 0.0,
            grayscale: false,
            solarize: false,
            solarize_threshold: 0.5,
        }
    }
}

/// Draw one transform from the recipe's distribution; advances the rng by a
/// fixed number of draws so sequences are reproducible.
pub fn sample_transform(recipe: &AugmentRecipe, rng: &mut ChaCha8Rng) -> Result<SampledTransform> {
    recipe.validate()?;
    if recipe.is_identity() {
        return Ok(SampledTransform::identity(recipe.id));
    }
    let mut tr = SampledTransform::identity(recipe.id);
    tr.flip = rng.gen::<f64>() < recipe.flip_prob;
    if recipe.crop_pad > 0.0 {
        tr.dx = rng.gen_range(-recipe.crop_pad..=recipe.crop_pad);
        tr.dy = rng.gen_range(-recipe.crop_pad..=recipe.crop_pad);
    }
    if recipe.jitter_strength > 0.0 {
        let s = recipe.jitter_strength;
        tr.jitter_scale = (0..3).map(|_| 1.0 + s * rng.gen_range(-1.0..1.0)).collect();
        tr.jitter_bias = (0..3).map(|_| 0.5 * s * rng.gen_range(-1.0..1.0)).collect();
    }
    if recipe.blur_prob > 0.0 && rng.gen::<f64>() < recipe.blur_prob {
        tr.blur_sigma = rng.gen_range(0.1..=recipe.blur_sigma_max.max(0.1));
    }
    if recipe.grayscale_prob > 0.0 {
        tr.grayscale = rng.gen::<f64>() < recipe.grayscale_prob;
    }
    if recipe.solarize_prob > 0.0 {
        tr.solarize = rng.gen::<f64>() < recipe.solarize_prob;
        tr.solarize_threshold = rng.gen_range(0.5..0.9);
    }
    Ok(tr)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = 2i32;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

const SOLARIZE_TEMP: f64 = 0.05;

fn check_channels(tr: &SampledTransform, c: usize) -> Result<()> {
    if (!tr.jitter_scale.is_empty() && tr.jitter_scale.len() != c) || (tr.grayscale && c != 3) {
        return Err(Error::Shape(format!(
            "transform sampled for 3-channel images applied to {c} channels"
        )));
    }
    Ok(())
}

/// Differentiable application to a (C,H,W) image var in [0,1]. Crop is a
/// continuous bilinear translation; solarize is a sigmoid-gated blend.
/// Output is clamped to [0,1] (straight-through derivative).
pub fn apply(t: &Tape, tr: &SampledTransform, image: &Var) -> Result<Var> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("apply: expected (C,H,W), got {s:?}")));
    }
    check_channels(tr, s[0])?;
    let mut x = image.clone();
    let mut touched = false;
    if tr.flip {
        x = t.flip_h(&x)?;
        touched = true;
    }
    if tr.dx != 0.0 || tr.dy != 0.0 {
        x = t.bilinear_shift(&x, tr.dx, tr.dy)?;
        touched = true;
    }
    if !tr.jitter_scale.is_empty() {
        x = t.channel_affine(&x, &tr.jitter_scale, &tr.jitter_bias)?;
        touched = true;
    }
    if tr.blur_sigma > 0.0 {
        x = t.blur(&x, &gaussian_kernel(tr.blur_sigma))?;
        touched = true;
    }
    if tr.grayscale {
        let c = s[0];
        x = t.channel_mix(&x, &vec![1.0 / c as f64; c * c])?;
        touched = true;
    }
    if tr.solarize {
        // x + (1 - 2x) * sigmoid((x - tau) / T): smooth pixel inversion
        let tau = t.scalar(tr.solarize_threshold)?;
        let inv_temp = t.scalar(1.0 / SOLARIZE_TEMP)?;
        let gate = t.sigmoid(&t.mul(&t.sub(&x, &tau)?, &inv_temp)?)?;
        let one = t.scalar(1.0)?;
        let two = t.scalar(2.0)?;
        let flipped = t.sub(&one, &t.mul(&two, &x)?)?;
        x = t.add(&x, &t.mul(&flipped, &gate)?)?;
        touched = true;
    }
    if touched {
        t.clamp(&x, 0.0, 1.0)
    } else {
        Ok(x)
    }
}

/// Exact (discrete) application used at training time: integer crop
/// offsets and hard solarize thresholding.
pub fn apply_discrete(tr: &SampledTransform, image: &[f64], c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if image.len() != c * h * w {
        return Err(Error::Shape("apply_discrete: pixel count mismatch".into()));
    }
    check_channels(tr, c)?;
    let mut x = image.to_vec();
    if tr.flip {
        let mut y = x.clone();
        for ch in 0..c {
            for row in 0..h {
                let base = (ch * h + row) * w;
                for col in 0..w {
                    y[base + col] = x[base + (w - 1 - col)];
                }
            }
        }
        x = y;
    }
    let (dx, dy) = (tr.dx.round() as isize, tr.dy.round() as isize);
    if dx != 0 || dy != 0 {
        let mut y = vec![0.0; x.len()];
        for ch in 0..c {
            for row in 0..h {
                let sr = row as isize + dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for col in 0..w {
                    let sc = col as isize + dx;
                    if sc < 0 || sc >= w as isize {
                        continue;
                    }
                    y[(ch * h + row) * w + col] = x[(ch * h + sr as usize) * w + sc as usize];
                }
            }
        }
        x = y;
    }
    if !tr.jitter_scale.is_empty() {
        for ch in 0..c {
            let (s, b) = (tr.jitter_scale[ch], tr.jitter_bias[ch]);
            for p in &mut x[ch * h * w..(ch + 1) * h * w] {
                *p = *p * s + b;
            }
        }
    }
    if tr.blur_sigma > 0.0 {
        let k = gaussian_kernel(tr.blur_sigma);
        x = blur_values(&x, c, h, w, &k);
    }
    if tr.grayscale {
        let hw = h * w;
        for p in 0..hw {
            let mean = (0..c).map(|ch| x[ch * hw + p]).sum::<f64>() / c as f64;
            for ch in 0..c {
                x[ch * hw + p] = mean;
            }
        }
    }
    if tr.solarize {
        for p in &mut x {
            if *p >= tr.solarize_threshold {
                *p = 1.0 - *p;
            }
        }
    }
    for p in &mut x {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(x)
}

fn blur_values(x: &[f64], c: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() as isize / 2;
    let mut tmp = vec![0.0; x.len()];
    for ch in 0..c {
        for row in 0..h {
            let base = (ch * h + row) * w;
            for col in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sc = col as isize + ki as isize - r;
                    if sc >= 0 && sc < w as isize {
                        acc += kv * x[base + sc as usize];
                    }
                }
                tmp[base + col] = acc;
            }
        }
    }
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sr = row as isize + ki as isize - r;
                    if sr >= 0 && sr < h as isize {
                        acc += kv * tmp[(ch * h + sr as usize) * w + col];
                    }
                }
                y[(ch * h + row) * w + col] = acc;
            }
        }
    }
    y
}

/// Monte-Carlo estimate of E_t[grad_theta L(t(base + delta), label)] with R
/// repeats, as a flat differentiable gradient vector on `t`.
///
/// With `recipe: none` this is exactly `param_grad` on base + delta.
#[allow(clippy::too_many_arguments)]
pub fn expected_grad_on(
    model: &Model,
    t: &Tape,
    base: &Var,
    delta: &Var,
    label: usize,
    kind: LossKind,
    recipe: &AugmentRecipe,
    repeats: usize,
    rng: &mut ChaCha8Rng,
    create_graph: bool,
) -> Result<Var> {
    if repeats == 0 {
        return Err(Error::Config("expected_grad: R must be >= 1".into()));
    }
    let (c, h, w) = model.spec.input_shape;
    let x = t.add(base, delta)?;
    if recipe.is_identity() {
        // degenerate expectation: one term, no averaging round-off
        let batch = t.reshape(&x, &[1, c, h, w])?;
        return models::param_grad_on(model, t, &batch, &[label], kind, create_graph);
    }
    let mut acc: Option<Var> = None;
    for _ in 0..repeats {
        let tr = sample_transform(recipe, rng)?;
        let xi = apply(t, &tr, &x)?;
        let batch = t.reshape(&xi, &[1, c, h, w])?;
        let g = models::param_grad_on(model, t, &batch, &[label], kind, create_graph)?;
        acc = Some(match acc {
            Some(a) => t.add(&a, &g)?,
            None => g,
        });
    }
    let inv = t.scalar(1.0 / repeats as f64)?;
    t.mul(&acc.unwrap(), &inv)
}

/// Detached convenience wrapper over raw pixel values.
pub fn expected_grad(
    model: &Model,
    base: &[f64],
    delta: &[f64],
    label: usize,
    kind: LossKind,
    recipe: &AugmentRecipe,
    repeats: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (c, h, w) = model.spec.input_shape;
    let t = Tape::new();
    let b = t.constant(&[c, h, w], base.to_vec())?;
    let d = t.constant(&[c, h, w], delta.to_vec())?;
    Ok(expected_grad_on(model, &t, &b, &d, label, kind, recipe, repeats, rng, false)?.value())
}
