//! The differentiation engine underneath everything else: reverse-mode
//! gradients where the backward pass is itself recorded on the tape, so
//! gradients of gradients come for free. The signer needs that: its
//! objective is a function of a model's parameter gradient.

use anyhow::Result;
use taggant::diffcore::{cosine, Tape};

fn main() -> Result<()> {
    let t = Tape::new();

    // f(x, y) = x^2 * y + y^3 at (x, y) = (3, 2)
    let x = t.leaf(&[1, 1], vec![3.0])?;
    let y = t.leaf(&[1, 1], vec![2.0])?;
    let f = t.add(&t.mul(&t.mul(&x, &x)?, &y)?, &t.mul(&t.mul(&y, &y)?, &y)?)?;
    println!("f(3, 2)       = {}  (expect 26)", f.item());

    // First-order: df/dx = 2xy = 12, df/dy = x^2 + 3y^2 = 21.
    let g = t.grad(&f, &[&x, &y], true)?;
    println!("df/dx, df/dy  = {}, {}  (expect 12, 21)", g[0].item(), g[1].item());

    // Second-order: because create_graph=true, g[0] is itself a tape node.
    // d2f/dx2 = 2y = 4 and the mixed partial d2f/dxdy = 2x = 6.
    let gg = t.grad(&g[0], &[&x, &y], false)?;
    println!("d2f/dx2       = {}  (expect 4)", gg[0].item());
    println!("d2f/dxdy      = {}  (expect 6)", gg[1].item());

    // The same machinery works on tensors. Cosine similarity between two
    // vectors, differentiated with respect to the first:
    let a = t.leaf(&[1, 3], vec![1.0, 0.0, 0.0])?;
    let b = t.constant(&[1, 3], vec![1.0, 1.0, 0.0])?;
    let c = cosine(&t, &a, &b)?;
    let dc = t.grad(&c, &[&a], false)?;
    println!("cos(a, b)     = {:.6}  (expect 0.707107)", c.item());
    println!("dcos/da       = {:?}", dc[0].value());

    Ok(())
}
