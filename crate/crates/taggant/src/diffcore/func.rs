//! Composite differentiable functions built from tape primitives.
//!
//! Everything here is an ordinary graph construction, so both first- and
//! second-order gradients come for free from the tape.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub fn dot(t: &Tape, a: &Var, b: &Var) -> Result<Var> {
    t.sum_all(&t.mul(a, b)?)
}

pub fn l2_norm(t: &Tape, a: &Var) -> Result<Var> {
    t.sqrt(&dot(t, a, a)?)
}

/// Cosine similarity of two flat vectors, clamped into [-1, 1] with a
/// straight-through derivative so rounding can never push it outside.
pub fn cosine(t: &Tape, a: &Var, b: &Var) -> Result<Var> {
    let num = dot(t, a, b)?;
    let den = t.mul(&l2_norm(t, a)?, &l2_norm(t, b)?)?;
    t.clamp(&t.div(&num, &den)?, -1.0, 1.0)
}

/// Tanh-approximation GELU.
pub fn gelu(t: &Tape, x: &Var) -> Result<Var> {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let half = t.scalar(0.5)?;
    let one = t.scalar(1.0)?;
    let c = t.scalar(C)?;
    let a = t.scalar(0.044715)?;
    let x3 = t.mul(&t.mul(x, x)?, x)?;
    let inner = t.mul(&c, &t.add(x, &t.mul(&a, &x3)?)?)?;
    let th = t.tanh(&inner)?;
    t.mul(&t.mul(&half, x)?, &t.add(&one, &th)?)
}

/// Row-wise softmax of a (rows, cols) logit matrix.
pub fn softmax(t: &Tape, logits: &Var) -> Result<Var> {
    let s = logits.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("softmax: expected 2-D, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let shifted = sub_row_max(t, logits, rows, cols)?;
    let e = t.exp(&shifted)?;
    let z = t.row_sum(&e)?;
    let inv = t.reshape(&t.div(&t.scalar(1.0)?, &z)?, &[rows])?;
    t.mul(&e, &t.row_broadcast(&inv, cols)?)
}

/// Subtract the (detached) row max for numerical stability.
fn sub_row_max(t: &Tape, logits: &Var, rows: usize, cols: usize) -> Result<Var> {
    let v = logits.value();
    let maxes: Vec<f64> = (0..rows)
        .map(|r| v[r * cols..(r + 1) * cols].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = t.constant(&[rows], maxes)?;
    t.sub(logits, &t.row_broadcast(&m, cols)?)
}

/// Mean softmax cross-entropy of a (rows, cols) logit batch against
/// integer labels.
pub fn cross_entropy(t: &Tape, logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("cross_entropy: expected 2-D, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    if labels.len() != rows {
        return Err(Error::Shape(format!("cross_entropy: {} labels for {rows} rows", labels.len())));
    }
    let z = sub_row_max(t, logits, rows, cols)?;
    let lse = t.ln(&t.row_sum(&t.exp(&z)?)?)?; // (rows)
    let zy = t.select_cols(&z, labels)?; // (rows)
    let per_row = t.sub(&lse, &zy)?;
    let inv_n = t.scalar(1.0 / rows as f64)?;
    t.mul(&t.sum_all(&per_row)?, &inv_n)
}

/// Mean (over rows) of the summed binary cross-entropy between per-class
/// logits and a one-hot target, computed in the stable softplus form.
pub fn bce_with_logits(t: &Tape, logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("bce_with_logits: expected 2-D, got {s:?}")));
    }
    let rows = s[0];
    if labels.len() != rows {
        return Err(Error::Shape(format!("bce_with_logits: {} labels for {rows} rows", labels.len())));
    }
    // softplus(z) - target * z, summed over classes, averaged over rows
    let sp = t.softplus(logits)?;
    let total = t.sum_all(&sp)?;
    let zy = t.select_cols(logits, labels)?;
    let hit = t.sum_all(&zy)?;
    let inv_n = t.scalar(1.0 / rows as f64)?;
    t.mul(&t.sub(&total, &hit)?, &inv_n)
}

/// Mean of all elements.
pub fn mean_all(t: &Tape, x: &Var) -> Result<Var> {
    let inv = t.scalar(1.0 / x.len() as f64)?;
    t.mul(&t.sum_all(x)?, &inv)
}

/// Mean squared difference between two same-shape tensors.
pub fn mse(t: &Tape, a: &Var, b: &Var) -> Result<Var> {
    let d = t.sub(a, b)?;
    mean_all(t, &t.mul(&d, &d)?)
}
