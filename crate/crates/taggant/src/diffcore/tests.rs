use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

/// Central finite differences of a scalar-valued function rebuilt per call.
fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let denom = g.abs().max(w.abs()).max(1.0);
        assert!(
            (g - w).abs() / denom <= tol,
            "{what}[{i}]: got {g}, want {w} (rel err {})",
            (g - w).abs() / denom
        );
    }
}

/// Check reverse-mode gradients of `build` against finite differences.
/// `build` constructs a scalar output from a single leaf tensor.
fn fd_check(shape: &[usize], x0: &[f64], build: &dyn Fn(&Tape, &Var) -> Result<Var>, what: &str) {
    let eval = |x: &[f64]| -> f64 {
        let t = Tape::new();
        let v = t.leaf(shape, x.to_vec()).unwrap();
        build(&t, &v).unwrap().item()
    };
    let t = Tape::new();
    let v = t.leaf(shape, x0.to_vec()).unwrap();
    let out = build(&t, &v).unwrap();
    let g = t.grad(&out, &[&v], false).unwrap()[0].value();
    let fd = finite_diff(&eval, x0, 1e-5);
    assert_close(&g, &fd, 1e-5, what);
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn square_forward() {
    let t = Tape::new();
    let x = t.leaf(&[1], vec![2.0]).unwrap();
    let y = t.mul(&x, &x).unwrap();
    assert_eq!(y.value(), vec![4.0]);
}

#[test]
fn softmax_symmetry() {
    let t = Tape::new();
    let x = t.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
    let s = softmax(&t, &x).unwrap();
    assert_eq!(s.value(), vec![0.5, 0.5]);
}

#[test]
fn self_cosine_is_one() {
    let t = Tape::new();
    let u = t.constant(&[2], vec![1.0, 0.0]).unwrap();
    let c = cosine(&t, &u, &u).unwrap();
    assert_eq!(c.item(), 1.0);
}

#[test]
fn first_order_polynomial() {
    let t = Tape::new();
    let x = t.leaf(&[], vec![3.0]).unwrap();
    let y = t.mul(&x, &x).unwrap();
    let g = t.grad(&y, &[&x], false).unwrap();
    assert_eq!(g[0].value(), vec![6.0]);
}

#[test]
fn second_order_polynomial() {
    // d/dx (d/dx x^3) = 6x = 12 at x=2
    let t = Tape::new();
    let x = t.leaf(&[], vec![2.0]).unwrap();
    let y = t.mul(&t.mul(&x, &x).unwrap(), &x).unwrap();
    let g1 = t.grad(&y, &[&x], true).unwrap();
    let g2 = t.grad(&g1[0], &[&x], false).unwrap();
    assert_eq!(g2[0].value(), vec![12.0]);
}

#[test]
fn grad_unreachable_target_errors() {
    let t = Tape::new();
    let x = t.leaf(&[], vec![1.0]).unwrap();
    let z = t.leaf(&[], vec![1.0]).unwrap();
    let y = t.mul(&x, &x).unwrap();
    assert!(t.grad(&y, &[&z], false).is_err());
}

#[test]
fn grad_non_scalar_output_errors() {
    let t = Tape::new();
    let x = t.leaf(&[2], vec![1.0, 2.0]).unwrap();
    let y = t.mul(&x, &x).unwrap();
    assert!(t.grad(&y, &[&x], false).is_err());
}

#[test]
fn non_finite_surfaces_as_error() {
    let t = Tape::new();
    let x = t.leaf(&[1], vec![0.0]).unwrap();
    assert!(t.ln(&x).is_err());
    let y = t.leaf(&[1], vec![-1.0]).unwrap();
    assert!(t.sqrt(&y).is_err());
}

#[test]
fn fd_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..1.5)).collect();
    let shape = [6];
    fd_check(&shape, &x0, &|t, v| mean_all(t, &t.mul(v, v)?), "mul");
    fd_check(&shape, &x0, &|t, v| mean_all(t, &t.exp(v)?), "exp");
    fd_check(&shape, &x0, &|t, v| mean_all(t, &t.ln(v)?), "ln");
    fd_check(&shape, &x0, &|t, v| mean_all(t, &t.sqrt(v)?), "sqrt");
    fd_check(&shape, &x0, &|t, v| mean_all(t, &t.tanh(v)?), "tanh");
    fd_check(&shape, &x0, &|t, v| mean_all(t, &t.sigmoid(v)?), "sigmoid");
    fd_check(&shape, &x0, &|t, v| mean_all(t, &t.softplus(v)?), "softplus");
    fd_check(&shape, &x0, &|t, v| mean_all(t, &gelu(t, v)?), "gelu");
    fd_check(&shape, &x0, &|t, v| {
        let c = t.constant(&[6], vec![0.3; 6])?;
        mean_all(t, &t.div(&c, v)?)
    }, "div");
    fd_check(&shape, &x0, &|t, v| {
        let c = t.constant(&[6], vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.7])?;
        mean_all(t, &t.sub(v, &c)?)
    }, "sub");
}

#[test]
fn fd_matmul_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = rand_vec(&mut rng, 6);
    fd_check(&[2, 3], &x0, &|t, v| {
        let w = t.constant(&[3, 2], vec![0.5, -0.3, 0.2, 0.8, -0.1, 0.4])?;
        mean_all(t, &t.matmul(v, &w)?)
    }, "matmul_lhs");
    fd_check(&[2, 3], &x0, &|t, v| {
        let a = t.constant(&[4, 2], rand_vec(&mut ChaCha8Rng::seed_from_u64(3), 8))?;
        mean_all(t, &t.matmul(&a, v)?)
    }, "matmul_rhs");
    fd_check(&[2, 3], &x0, &|t, v| mean_all(t, &t.row_sum(v)?), "row_sum");
    fd_check(&[2, 3], &x0, &|t, v| mean_all(t, &t.col_sum(v)?), "col_sum");
    fd_check(&[3], &x0[..3], &|t, v| mean_all(t, &t.row_broadcast(v, 4)?), "row_broadcast");
    fd_check(&[3], &x0[..3], &|t, v| mean_all(t, &t.col_broadcast(v, 4)?), "col_broadcast");
    fd_check(&[2, 3], &x0, &|t, v| {
        let picked = t.select_cols(v, &[2, 0])?;
        mean_all(t, &t.mul(&picked, &picked)?)
    }, "select_cols");
    fd_check(&[2, 3], &x0, &|t, v| mean_all(t, &t.transpose(v)?), "transpose");
}

#[test]
fn fd_conv_pool_image_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = rand_vec(&mut rng, 2 * 4 * 4);
    let w0 = rand_vec(&mut rng, 3 * 2 * 3 * 3);

    // conv wrt input
    let wfix = w0.clone();
    fd_check(&[1, 2, 4, 4], &img, &|t, v| {
        let w = t.constant(&[3, 2, 3, 3], wfix.clone())?;
        mean_all(t, &t.conv2d(v, &w, 1, 1)?)
    }, "conv2d_input");
    // strided conv wrt input
    let wfix = w0.clone();
    fd_check(&[1, 2, 4, 4], &img, &|t, v| {
        let w = t.constant(&[3, 2, 3, 3], wfix.clone())?;
        mean_all(t, &t.conv2d(v, &w, 2, 1)?)
    }, "conv2d_strided_input");
    // conv wrt weight
    let ifix = img.clone();
    fd_check(&[3, 2, 3, 3], &w0, &|t, v| {
        let x = t.constant(&[1, 2, 4, 4], ifix.clone())?;
        mean_all(t, &t.conv2d(&x, v, 1, 1)?)
    }, "conv2d_weight");

    fd_check(&[1, 2, 4, 4], &img, &|t, v| {
        let p = t.avg_pool(v, 2)?;
        mean_all(t, &t.mul(&p, &p)?)
    }, "avg_pool");

    let px = rand_vec(&mut rng, 3 * 4 * 4);
    fd_check(&[3, 4, 4], &px, &|t, v| mean_all(t, &t.flip_h(v)?), "flip_h");
    fd_check(&[3, 4, 4], &px, &|t, v| {
        let b = t.blur(v, &[0.25, 0.5, 0.25])?;
        mean_all(t, &t.mul(&b, &b)?)
    }, "blur");
    fd_check(&[3, 4, 4], &px, &|t, v| {
        let m = vec![1.0 / 3.0; 9];
        let g = t.channel_mix(v, &m)?;
        mean_all(t, &t.mul(&g, &g)?)
    }, "channel_mix");
    fd_check(&[3, 4, 4], &px, &|t, v| {
        let a = t.channel_affine(v, &[1.1, 0.9, 1.05], &[0.02, -0.03, 0.0])?;
        mean_all(t, &t.mul(&a, &a)?)
    }, "channel_affine");
    fd_check(&[3, 4, 4], &px, &|t, v| {
        let s = t.bilinear_shift(v, 0.37, -0.85)?;
        mean_all(t, &t.mul(&s, &s)?)
    }, "bilinear_shift");
    fd_check(&[2, 3, 4, 1], &rand_vec(&mut rng, 24), &|t, v| {
        mean_all(t, &t.channel_sum(v)?)
    }, "channel_sum");
    fd_check(&[3], &rand_vec(&mut rng, 3), &|t, v| {
        let b = t.channel_broadcast(v, 2, 2, 2)?;
        mean_all(t, &t.mul(&b, &b)?)
    }, "channel_broadcast");
}

#[test]
fn fd_losses_and_composites() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let logits = rand_vec(&mut rng, 3 * 4);
    fd_check(&[3, 4], &logits, &|t, v| cross_entropy(t, v, &[1, 3, 0]), "cross_entropy");
    fd_check(&[3, 4], &logits, &|t, v| bce_with_logits(t, v, &[1, 3, 0]), "bce_with_logits");
    let u = rand_vec(&mut rng, 5);
    let vfix = rand_vec(&mut rng, 5);
    fd_check(&[5], &u, &|t, v| {
        let w = t.constant(&[5], vfix.clone())?;
        cosine(t, v, &w)
    }, "cosine");
    fd_check(&[5], &u, &|t, v| l2_norm(t, v), "l2_norm");
    fd_check(&[8], &rand_vec(&mut rng, 8), &|t, v| {
        let a = t.slice(v, 1, 3)?;
        let b = t.slice(v, 4, 4)?;
        let c = t.concat(&[&a, &b])?;
        mean_all(t, &t.mul(&c, &c)?)
    }, "slice_concat");
    fd_check(&[6], &rand_vec(&mut rng, 6), &|t, v| {
        let r = t.reshape(v, &[2, 3])?;
        mean_all(t, &t.mul(&r, &r)?)
    }, "reshape");
}

#[test]
fn clamp_is_straight_through() {
    let t = Tape::new();
    let x = t.leaf(&[3], vec![-2.0, 0.5, 2.0]).unwrap();
    let y = t.sum_all(&t.clamp(&x, 0.0, 1.0).unwrap()).unwrap();
    let g = t.grad(&y, &[&x], false).unwrap();
    assert_eq!(g[0].value(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn cross_entropy_uniform_is_ln_k() {
    let t = Tape::new();
    let logits = t.constant(&[1, 10], vec![0.0; 10]).unwrap();
    let l = cross_entropy(&t, &logits, &[4]).unwrap();
    assert!((l.item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn bce_logit_zero_target_one_is_ln2() {
    let t = Tape::new();
    let logits = t.constant(&[1, 1], vec![0.0]).unwrap();
    let l = bce_with_logits(&t, &logits, &[0]).unwrap();
    assert!((l.item() - 2f64.ln()).abs() < 1e-12);
}

/// Composite second-order check mirroring the crafting objective:
/// s(delta) = cos(grad_theta L(x + delta), c) on a tiny seeded MLP.
#[test]
fn second_order_cosine_of_param_grad_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let in_dim = 6;
    let hid = 5;
    let classes = 3;
    let w1v = rand_vec(&mut rng, in_dim * hid);
    let b1v = rand_vec(&mut rng, hid);
    let w2v = rand_vec(&mut rng, hid * classes);
    let xv = rand_vec(&mut rng, in_dim);
    let cv = rand_vec(&mut rng, in_dim * hid + hid + hid * classes);

    let s_of_delta = |delta: &[f64]| -> f64 {
        let t = Tape::new();
        let w1 = t.leaf(&[in_dim, hid], w1v.clone()).unwrap();
        let b1 = t.leaf(&[hid], b1v.clone()).unwrap();
        let w2 = t.leaf(&[hid, classes], w2v.clone()).unwrap();
        let d = t.leaf(&[1, in_dim], delta.to_vec()).unwrap();
        let x = t.constant(&[1, in_dim], xv.clone()).unwrap();
        let inp = t.add(&x, &d).unwrap();
        let h = gelu(&t, &t.add(&t.matmul(&inp, &w1).unwrap(), &t.col_broadcast(&b1, 1).unwrap()).unwrap()).unwrap();
        let logits = t.matmul(&h, &w2).unwrap();
        let loss = cross_entropy(&t, &logits, &[1]).unwrap();
        let grads = t.grad(&loss, &[&w1, &b1, &w2], true).unwrap();
        let flat_parts: Vec<Var> = grads
            .iter()
            .map(|g| t.reshape(g, &[g.len()]).unwrap())
            .collect();
        let refs: Vec<&Var> = flat_parts.iter().collect();
        let flat = t.concat(&refs).unwrap();
        let c = t.constant(&[cv.len()], cv.clone()).unwrap();
        cosine(&t, &flat, &c).unwrap().item()
    };

    // analytic gradient of s wrt delta via double backward
    let delta0 = rand_vec(&mut rng, in_dim).iter().map(|v| v * 0.05).collect::<Vec<_>>();
    let t = Tape::new();
    let w1 = t.leaf(&[in_dim, hid], w1v.clone()).unwrap();
    let b1 = t.leaf(&[hid], b1v.clone()).unwrap();
    let w2 = t.leaf(&[hid, classes], w2v.clone()).unwrap();
    let d = t.leaf(&[1, in_dim], delta0.clone()).unwrap();
    let x = t.constant(&[1, in_dim], xv.clone()).unwrap();
    let inp = t.add(&x, &d).unwrap();
    let h = gelu(&t, &t.add(&t.matmul(&inp, &w1).unwrap(), &t.col_broadcast(&b1, 1).unwrap()).unwrap()).unwrap();
    let logits = t.matmul(&h, &w2).unwrap();
    let loss = cross_entropy(&t, &logits, &[1]).unwrap();
    let grads = t.grad(&loss, &[&w1, &b1, &w2], true).unwrap();
    let flat_parts: Vec<Var> = grads.iter().map(|g| t.reshape(g, &[g.len()]).unwrap()).collect();
    let refs: Vec<&Var> = flat_parts.iter().collect();
    let flat = t.concat(&refs).unwrap();
    let c = t.constant(&[cv.len()], cv.clone()).unwrap();
    let s = cosine(&t, &flat, &c).unwrap();
    let gd = t.grad(&s, &[&d], false).unwrap()[0].value();

    let fd = finite_diff(&s_of_delta, &delta0, 1e-5);
    assert_close(&gd, &fd, 1e-4, "second_order_cosine");
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let t = Tape::new();
    let x = t.leaf(&[2, 3], rand_vec(&mut rng, 6)).unwrap();
    let w = t.leaf(&[3, 2], rand_vec(&mut rng, 6)).unwrap();
    let y = softmax(&t, &t.matmul(&x, &w).unwrap()).unwrap();
    let before = y.value();
    t.replay().unwrap();
    assert_eq!(y.value(), before);
}

#[test]
fn replay_with_rebound_leaf() {
    let t = Tape::new();
    let x = t.leaf(&[2], vec![1.0, 2.0]).unwrap();
    let y = t.sum_all(&t.mul(&x, &x).unwrap()).unwrap();
    assert_eq!(y.item(), 5.0);
    t.bind(&x, vec![3.0, 4.0]).unwrap();
    t.replay().unwrap();
    assert_eq!(y.item(), 25.0);
}

#[test]
fn determinism_same_inputs_same_grads() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = Tape::new();
        let x = t.leaf(&[1, 2, 4, 4], rand_vec(&mut rng, 32)).unwrap();
        let w = t.leaf(&[2, 2, 3, 3], rand_vec(&mut rng, 36)).unwrap();
        let y = t.conv2d(&x, &w, 1, 1).unwrap();
        let s = mean_all(&t, &t.mul(&y, &y).unwrap()).unwrap();
        let g = t.grad(&s, &[&x, &w], false).unwrap();
        (s.item(), g[0].value(), g[1].value())
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn cosine_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..200 {
        let n = rng.gen_range(1..8);
        let t = Tape::new();
        let mut a = rand_vec(&mut rng, n);
        let mut b = rand_vec(&mut rng, n);
        // avoid exact zero vectors
        a[0] += 2.0;
        b[0] -= 2.0;
        let av = t.constant(&[n], a).unwrap();
        let bv = t.constant(&[n], b).unwrap();
        let c = cosine(&t, &av, &bv).unwrap().item();
        assert!((-1.0..=1.0).contains(&c));
    }
}
