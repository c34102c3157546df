//! Tape-based reverse-mode autodiff over dense f64 tensors.
//!
//! Every op appends a node to the tape. `Tape::grad` walks the tape in
//! reverse and builds the adjoints *as new tape nodes*, so a gradient is
//! itself a differentiable value: calling `grad` on a scalar function of
//! gradients yields second-order derivatives.
//!
//! All kernels run sequentially with a fixed summation order, so the same
//! tape with the same inputs produces bit-identical values and gradients.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvMeta {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolMeta {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    /// Elementwise clamp with a straight-through derivative.
    Clamp { lo: f64, hi: f64 },
    MatMul { m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    Conv2d(ConvMeta),
    /// Gradient of Conv2d wrt its input: inputs are (dy, weight).
    ConvIGrad(ConvMeta),
    /// Gradient of Conv2d wrt its weight: inputs are (dy, x).
    ConvWGrad(ConvMeta),
    AvgPool(PoolMeta),
    AvgUnpool(PoolMeta),
    SumAll,
    BroadcastAll { len: usize },
    RowSum { rows: usize, cols: usize },
    RowBroadcast { rows: usize, cols: usize },
    ColSum { rows: usize, cols: usize },
    ColBroadcast { rows: usize, cols: usize },
    ChannelSum { n: usize, c: usize, hw: usize },
    ChannelBroadcast { n: usize, c: usize, hw: usize },
    /// out[r] = in[r, idx[r]]
    SelectCols { indices: Arc<Vec<usize>>, cols: usize },
    ScatterCols { indices: Arc<Vec<usize>>, cols: usize },
    Concat { sizes: Arc<Vec<usize>> },
    Slice { offset: usize, len: usize, total: usize },
    PadScatter { offset: usize, total: usize },
    Reshape,
    FlipH { c: usize, h: usize, w: usize },
    /// Depthwise separable blur with a symmetric odd kernel (self-adjoint).
    Blur { c: usize, h: usize, w: usize, kernel: Arc<Vec<f64>> },
    /// out[o] = sum_i matrix[o*c+i] * in[i], per pixel. Constant matrix.
    ChannelMix { c: usize, h: usize, w: usize, matrix: Arc<Vec<f64>> },
    /// out[ch] = in[ch] * scale[ch] + bias[ch]. Constant coefficients.
    ChannelAffine { c: usize, hw: usize, scale: Arc<Vec<f64>>, bias: Arc<Vec<f64>> },
    /// Bilinear resampling at (y+dy, x+dx) with zero outside the image.
    BilinearShift { c: usize, h: usize, w: usize, dx: f64, dy: f64 },
    BilinearShiftT { c: usize, h: usize, w: usize, dx: f64, dy: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Relu => "relu",
            Op::Clamp { .. } => "clamp",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::ConvIGrad(_) => "conv2d_igrad",
            Op::ConvWGrad(_) => "conv2d_wgrad",
            Op::AvgPool(_) => "avg_pool",
            Op::AvgUnpool(_) => "avg_unpool",
            Op::SumAll => "sum_all",
            Op::BroadcastAll { .. } => "broadcast_all",
            Op::RowSum { .. } => "row_sum",
            Op::RowBroadcast { .. } => "row_broadcast",
            Op::ColSum { .. } => "col_sum",
            Op::ColBroadcast { .. } => "col_broadcast",
            Op::ChannelSum { .. } => "channel_sum",
            Op::ChannelBroadcast { .. } => "channel_broadcast",
            Op::SelectCols { .. } => "select_cols",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::PadScatter { .. } => "pad_scatter",
            Op::Reshape => "reshape",
            Op::FlipH { .. } => "flip_h",
            Op::Blur { .. } => "blur",
            Op::ChannelMix { .. } => "channel_mix",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::BilinearShift { .. } => "bilinear_shift",
            Op::BilinearShiftT { .. } => "bilinear_shift_t",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
struct Graph {
    nodes: Vec<Node>,
}

/// Recording tape. Cheap to clone (shared handle). Confined to one thread.
#[derive(Clone)]
pub struct Tape {
    g: Rc<RefCell<Graph>>,
}

/// Handle to a tensor value living on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    pub(crate) id: usize,
    shape: Vec<usize>,
}

impl Var {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product::<usize>().max(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.g.borrow().nodes[self.id].value.clone()
    }

    /// Scalar extraction; panics if not a single-element tensor.
    pub fn item(&self) -> f64 {
        let g = self.tape.g.borrow();
        let v = &g.nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar");
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.g.borrow().nodes[self.id].requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product::<usize>().max(1)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { g: Rc::new(RefCell::new(Graph::default())) }
    }

    pub fn node_count(&self) -> usize {
        self.g.borrow().nodes.len()
    }

    fn same_tape(&self, v: &Var) -> bool {
        Rc::ptr_eq(&self.g, &v.tape.g)
    }

    fn push(&self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        debug_assert_eq!(value.len(), numel(&shape));
        let mut g = self.g.borrow_mut();
        let id = g.nodes.len();
        g.nodes.push(Node { op, inputs, shape: shape.clone(), value, requires_grad });
        Ok(Var { tape: self.clone(), id, shape })
    }

    /// Differentiable input (parameter or pixel tensor).
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!("leaf data len {} != shape {:?}", data.len(), shape)));
        }
        self.push(Op::Leaf, vec![], shape.to_vec(), data, true)
    }

    /// Non-differentiable value.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!("const data len {} != shape {:?}", data.len(), shape)));
        }
        self.push(Op::Const, vec![], shape.to_vec(), data, false)
    }

    pub fn scalar(&self, x: f64) -> Result<Var> {
        self.constant(&[], vec![x])
    }

    /// Rebind a leaf's value (same length) for replay.
    pub fn bind(&self, leaf: &Var, data: Vec<f64>) -> Result<()> {
        let mut g = self.g.borrow_mut();
        let node = &mut g.nodes[leaf.id];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Shape("bind target is not a leaf".into()));
        }
        if data.len() != node.value.len() {
            return Err(Error::Shape("bind length mismatch".into()));
        }
        node.value = data;
        Ok(())
    }

    /// Recompute every node value in order. Bit-identical to the original
    /// forward pass when leaf values are unchanged.
    pub fn replay(&self) -> Result<()> {
        let n = self.g.borrow().nodes.len();
        for id in 0..n {
            let (op, inputs) = {
                let g = self.g.borrow();
                let node = &g.nodes[id];
                if matches!(node.op, Op::Leaf | Op::Const) {
                    continue;
                }
                (node.op.clone(), node.inputs.clone())
            };
            let value = {
                let g = self.g.borrow();
                eval_op(&g, &op, &inputs)?
            };
            if value.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(op.name().to_string()));
            }
            self.g.borrow_mut().nodes[id].value = value;
        }
        Ok(())
    }

    fn unary(&self, op: Op, a: &Var) -> Result<Var> {
        let rg = a.requires_grad();
        let value = {
            let g = self.g.borrow();
            eval_op(&g, &op, &[a.id])?
        };
        let shape = out_shape(&op, &[a.shape.clone()]);
        self.push(op, vec![a.id], shape, value, rg)
    }

    fn binary(&self, op: Op, a: &Var, b: &Var) -> Result<Var> {
        if !self.same_tape(a) || !self.same_tape(b) {
            return Err(Error::Shape("vars from different tapes".into()));
        }
        let rg = a.requires_grad() || b.requires_grad();
        let value = {
            let g = self.g.borrow();
            eval_op(&g, &op, &[a.id, b.id])?
        };
        let shape = out_shape(&op, &[a.shape.clone(), b.shape.clone()]);
        self.push(op, vec![a.id, b.id], shape, value, rg)
    }

    fn check_ew(&self, a: &Var, b: &Var, what: &str) -> Result<()> {
        if a.len() == b.len() || a.len() == 1 || b.len() == 1 {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: incompatible lengths {} vs {}", a.len(), b.len())))
        }
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.check_ew(a, b, "add")?;
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.check_ew(a, b, "sub")?;
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.check_ew(a, b, "mul")?;
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        self.check_ew(a, b, "div")?;
        self.binary(Op::Div, a, b)
    }

    pub fn neg(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Neg, a)
    }

    pub fn exp(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Exp, a)
    }

    pub fn ln(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Ln, a)
    }

    pub fn sqrt(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Sqrt, a)
    }

    pub fn tanh(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Tanh, a)
    }

    pub fn sigmoid(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a)
    }

    pub fn softplus(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Softplus, a)
    }

    pub fn relu(&self, a: &Var) -> Result<Var> {
        self.unary(Op::Relu, a)
    }

    /// Elementwise clamp; the derivative is straight-through (identity).
    pub fn clamp(&self, a: &Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Op::Clamp { lo, hi }, a)
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.binary(Op::MatMul { m, k, n }, a, b)
    }

    pub fn transpose(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose: {s:?}")));
        }
        self.unary(Op::Transpose { rows: s[0], cols: s[1] }, a)
    }

    /// Batched 2-D convolution, NCHW input, (co, ci, kh, kw) weight.
    pub fn conv2d(&self, x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Shape(format!("conv2d: x {sx:?}, w {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride 0".into()));
        }
        let (h, wd) = (sx[2], sx[3]);
        if h + 2 * pad < sw[2] || wd + 2 * pad < sw[3] {
            return Err(Error::Shape("conv2d: kernel larger than padded input".into()));
        }
        let meta = ConvMeta {
            n: sx[0],
            ci: sx[1],
            co: sw[0],
            h,
            w: wd,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: (h + 2 * pad - sw[2]) / stride + 1,
            ow: (wd + 2 * pad - sw[3]) / stride + 1,
        };
        self.binary(Op::Conv2d(meta), x, w)
    }

    /// Non-overlapping k x k average pooling; spatial dims must divide by k.
    pub fn avg_pool(&self, x: &Var, k: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("avg_pool: {s:?}")));
        }
        if k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::Shape(format!("avg_pool: dims {s:?} not divisible by {k}")));
        }
        self.unary(Op::AvgPool(PoolMeta { n: s[0], c: s[1], h: s[2], w: s[3], k }), x)
    }

    pub fn sum_all(&self, a: &Var) -> Result<Var> {
        self.unary(Op::SumAll, a)
    }

    pub fn row_sum(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("row_sum: {s:?}")));
        }
        self.unary(Op::RowSum { rows: s[0], cols: s[1] }, a)
    }

    pub fn row_broadcast(&self, a: &Var, cols: usize) -> Result<Var> {
        let s = a.shape();
        if s.len() != 1 {
            return Err(Error::Shape(format!("row_broadcast: {s:?}")));
        }
        self.unary(Op::RowBroadcast { rows: s[0], cols }, a)
    }

    pub fn col_sum(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("col_sum: {s:?}")));
        }
        self.unary(Op::ColSum { rows: s[0], cols: s[1] }, a)
    }

    pub fn col_broadcast(&self, a: &Var, rows: usize) -> Result<Var> {
        let s = a.shape();
        if s.len() != 1 {
            return Err(Error::Shape(format!("col_broadcast: {s:?}")));
        }
        self.unary(Op::ColBroadcast { rows, cols: s[0] }, a)
    }

    pub fn channel_sum(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("channel_sum: {s:?}")));
        }
        self.unary(Op::ChannelSum { n: s[0], c: s[1], hw: s[2] * s[3] }, a)
    }

    pub fn channel_broadcast(&self, a: &Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let s = a.shape();
        if s.len() != 1 {
            return Err(Error::Shape(format!("channel_broadcast: {s:?}")));
        }
        self.unary(Op::ChannelBroadcast { n, c: s[0], hw: h * w }, a)
    }

    /// Per-row column pick: out[r] = a[r, indices[r]].
    pub fn select_cols(&self, a: &Var, indices: &[usize]) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 || indices.len() != s[0] {
            return Err(Error::Shape(format!("select_cols: {s:?} with {} indices", indices.len())));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= s[1]) {
            return Err(Error::Shape(format!("select_cols: index {bad} out of {}", s[1])));
        }
        self.unary(Op::SelectCols { indices: Arc::new(indices.to_vec()), cols: s[1] }, a)
    }

    /// Flat 1-D concatenation.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: empty".into()));
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat { sizes: Arc::new(sizes.clone()) };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let g = self.g.borrow();
            eval_op(&g, &op, &ids)?
        };
        let total: usize = sizes.iter().sum();
        self.push(op, ids, vec![total], value, rg)
    }

    /// 1-D slice.
    pub fn slice(&self, a: &Var, offset: usize, len: usize) -> Result<Var> {
        let total = a.len();
        if offset + len > total {
            return Err(Error::Shape(format!("slice: {offset}+{len} > {total}")));
        }
        self.unary(Op::Slice { offset, len, total }, a)
    }

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != a.len() {
            return Err(Error::Shape(format!("reshape: {} -> {:?}", a.len(), shape)));
        }
        let rg = a.requires_grad();
        let value = a.value();
        self.push(Op::Reshape, vec![a.id], shape.to_vec(), value, rg)
    }

    fn chw(&self, a: &Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = a.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("{what}: expected (C,H,W), got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    pub fn flip_h(&self, a: &Var) -> Result<Var> {
        let (c, h, w) = self.chw(a, "flip_h")?;
        self.unary(Op::FlipH { c, h, w }, a)
    }

    pub fn blur(&self, a: &Var, kernel: &[f64]) -> Result<Var> {
        let (c, h, w) = self.chw(a, "blur")?;
        if kernel.len() % 2 == 0 {
            return Err(Error::Shape("blur: kernel length must be odd".into()));
        }
        self.unary(Op::Blur { c, h, w, kernel: Arc::new(kernel.to_vec()) }, a)
    }

    pub fn channel_mix(&self, a: &Var, matrix: &[f64]) -> Result<Var> {
        let (c, h, w) = self.chw(a, "channel_mix")?;
        if matrix.len() != c * c {
            return Err(Error::Shape(format!("channel_mix: matrix len {} != {c}x{c}", matrix.len())));
        }
        self.unary(Op::ChannelMix { c, h, w, matrix: Arc::new(matrix.to_vec()) }, a)
    }

    /// Per-channel affine with constant coefficients (augmentation jitter).
    pub fn channel_affine(&self, a: &Var, scale: &[f64], bias: &[f64]) -> Result<Var> {
        let (c, h, w) = self.chw(a, "channel_affine")?;
        if scale.len() != c || bias.len() != c {
            return Err(Error::Shape("channel_affine: coefficient length != C".into()));
        }
        self.unary(
            Op::ChannelAffine { c, hw: h * w, scale: Arc::new(scale.to_vec()), bias: Arc::new(bias.to_vec()) },
            a,
        )
    }

    /// Sample the image at (y+dy, x+dx) bilinearly, zero outside.
    pub fn bilinear_shift(&self, a: &Var, dx: f64, dy: f64) -> Result<Var> {
        let (c, h, w) = self.chw(a, "bilinear_shift")?;
        if !dx.is_finite() || !dy.is_finite() {
            return Err(Error::Shape("bilinear_shift: non-finite offset".into()));
        }
        self.unary(Op::BilinearShift { c, h, w, dx, dy }, a)
    }

    /// Reverse-mode gradient of `output` (a scalar) wrt each var in `wrt`.
    ///
    /// With `create_graph` the returned vars stay attached to the tape and
    /// can be differentiated again; without it they are detached constants.
    pub fn grad(&self, output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
        if output.len() != 1 {
            return Err(Error::Shape(format!("grad: output shape {:?} is not scalar", output.shape())));
        }
        if !output.requires_grad() {
            return Err(Error::Shape("grad: output does not depend on any differentiable leaf".into()));
        }
        let limit = output.id;
        let mut adjoints: Vec<Option<Var>> = Vec::new();
        adjoints.resize(limit + 1, None);
        adjoints[limit] = Some(self.scalar(1.0)?);

        for id in (0..=limit).rev() {
            let Some(adj) = adjoints[id].clone() else { continue };
            let (op, inputs) = {
                let g = self.g.borrow();
                let node = &g.nodes[id];
                if node.inputs.is_empty() {
                    continue;
                }
                (node.op.clone(), node.inputs.clone())
            };
            let contribs = self.vjp(id, &op, &inputs, &adj)?;
            for (input_id, contrib) in contribs {
                let needs = self.g.borrow().nodes[input_id].requires_grad;
                if !needs {
                    continue;
                }
                adjoints[input_id] = Some(match adjoints[input_id].take() {
                    Some(prev) => self.add(&prev, &contrib)?,
                    None => contrib,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for v in wrt {
            let adj = adjoints
                .get(v.id)
                .and_then(|a| a.clone())
                .ok_or_else(|| Error::Shape(format!("grad: target node {} not reachable from output", v.id)))?;
            if create_graph {
                out.push(adj);
            } else {
                out.push(self.constant(&v.shape.clone(), adj.value())?);
            }
        }
        Ok(out)
    }

    fn var(&self, id: usize) -> Var {
        let shape = self.g.borrow().nodes[id].shape.clone();
        Var { tape: self.clone(), id, shape }
    }

    /// Reduce an adjoint contribution to a scalar when the input it flows
    /// into was broadcast from a single element.
    fn reduce_for(&self, input_id: usize, contrib: Var) -> Result<Var> {
        let in_len = numel(&self.g.borrow().nodes[input_id].shape);
        if in_len == 1 && contrib.len() > 1 {
            let summed = self.sum_all(&contrib)?;
            // keep the input's exact shape ([] vs [1])
            let shape = self.g.borrow().nodes[input_id].shape.clone();
            self.reshape(&summed, &shape)
        } else {
            Ok(contrib)
        }
    }

    fn vjp(&self, node_id: usize, op: &Op, inputs: &[usize], adj: &Var) -> Result<Vec<(usize, Var)>> {
        let out = self.var(node_id);
        let contribs: Vec<(usize, Var)> = match op {
            Op::Leaf | Op::Const => vec![],
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![(a, self.reduce_for(a, adj.clone())?), (b, self.reduce_for(b, adj.clone())?)]
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                let nb = self.neg(adj)?;
                vec![(a, self.reduce_for(a, adj.clone())?), (b, self.reduce_for(b, nb)?)]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (va, vb) = (self.var(a), self.var(b));
                let ga = self.mul(adj, &vb)?;
                let gb = self.mul(adj, &va)?;
                vec![(a, self.reduce_for(a, ga)?), (b, self.reduce_for(b, gb)?)]
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let (va, vb) = (self.var(a), self.var(b));
                let ga = self.div(adj, &vb)?;
                // gb = -adj * a / b^2
                let num = self.mul(adj, &va)?;
                let den = self.mul(&vb, &vb)?;
                let gb = self.neg(&self.div(&num, &den)?)?;
                vec![(a, self.reduce_for(a, ga)?), (b, self.reduce_for(b, gb)?)]
            }
            Op::Neg => vec![(inputs[0], self.neg(adj)?)],
            Op::Exp => vec![(inputs[0], self.mul(adj, &out)?)],
            Op::Ln => vec![(inputs[0], self.div(adj, &self.var(inputs[0]))?)],
            Op::Sqrt => {
                let two = self.scalar(2.0)?;
                let den = self.mul(&two, &out)?;
                vec![(inputs[0], self.div(adj, &den)?)]
            }
            Op::Tanh => {
                let one = self.scalar(1.0)?;
                let sq = self.mul(&out, &out)?;
                let d = self.sub(&one, &sq)?;
                vec![(inputs[0], self.mul(adj, &d)?)]
            }
            Op::Sigmoid => {
                let one = self.scalar(1.0)?;
                let d = self.mul(&out, &self.sub(&one, &out)?)?;
                vec![(inputs[0], self.mul(adj, &d)?)]
            }
            Op::Softplus => {
                let s = self.sigmoid(&self.var(inputs[0]))?;
                vec![(inputs[0], self.mul(adj, &s)?)]
            }
            Op::Relu => {
                // subgradient mask, treated as locally constant
                let x = self.var(inputs[0]);
                let mask: Vec<f64> = x.value().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let m = self.constant(x.shape(), mask)?;
                vec![(inputs[0], self.mul(adj, &m)?)]
            }
            Op::Clamp { .. } => vec![(inputs[0], adj.clone())],
            Op::MatMul { .. } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (va, vb) = (self.var(a), self.var(b));
                let ga = self.matmul(adj, &self.transpose(&vb)?)?;
                let gb = self.matmul(&self.transpose(&va)?, adj)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose { .. } => vec![(inputs[0], self.transpose(adj)?)],
            Op::Conv2d(meta) => {
                let (x, w) = (inputs[0], inputs[1]);
                let gx = self.binary(Op::ConvIGrad(*meta), adj, &self.var(w))?;
                let gw = self.binary(Op::ConvWGrad(*meta), adj, &self.var(x))?;
                vec![(x, gx), (w, gw)]
            }
            Op::ConvIGrad(meta) => {
                // node = igrad(g, w); adj has the x shape
                let (gid, wid) = (inputs[0], inputs[1]);
                let gg = self.conv2d(adj, &self.var(wid), meta.stride, meta.pad)?;
                let gw = self.binary(Op::ConvWGrad(*meta), &self.var(gid), adj)?;
                vec![(gid, gg), (wid, gw)]
            }
            Op::ConvWGrad(meta) => {
                // node = wgrad(g, x); adj has the weight shape
                let (gid, xid) = (inputs[0], inputs[1]);
                let gg = self.conv2d(&self.var(xid), adj, meta.stride, meta.pad)?;
                let gx = self.binary(Op::ConvIGrad(*meta), &self.var(gid), adj)?;
                vec![(gid, gg), (xid, gx)]
            }
            Op::AvgPool(meta) => vec![(inputs[0], self.unary(Op::AvgUnpool(*meta), adj)?)],
            Op::AvgUnpool(meta) => vec![(inputs[0], self.unary(Op::AvgPool(*meta), adj)?)],
            Op::SumAll => {
                let len = numel(&self.g.borrow().nodes[inputs[0]].shape);
                let shape = self.g.borrow().nodes[inputs[0]].shape.clone();
                let b = self.unary(Op::BroadcastAll { len }, adj)?;
                vec![(inputs[0], self.reshape(&b, &shape)?)]
            }
            Op::BroadcastAll { .. } => vec![(inputs[0], self.reshape(&self.sum_all(adj)?, self.var(inputs[0]).shape())?)],
            Op::RowSum { cols, .. } => vec![(inputs[0], self.row_broadcast(adj, *cols)?)],
            Op::RowBroadcast { .. } => vec![(inputs[0], self.row_sum(adj)?)],
            Op::ColSum { rows, .. } => vec![(inputs[0], self.col_broadcast(adj, *rows)?)],
            Op::ColBroadcast { .. } => vec![(inputs[0], self.col_sum(adj)?)],
            Op::ChannelSum { n, c, hw } => {
                let (nn, hh) = (*n, *hw);
                let _ = c;
                let v = self.var(inputs[0]);
                let s = v.shape().to_vec();
                let b = self.unary(Op::ChannelBroadcast { n: nn, c: s[1], hw: hh }, adj)?;
                vec![(inputs[0], b)]
            }
            Op::ChannelBroadcast { .. } => vec![(inputs[0], self.channel_sum(adj)?)],
            Op::SelectCols { indices, cols } => {
                let sc = self.unary(Op::ScatterCols { indices: indices.clone(), cols: *cols }, adj)?;
                vec![(inputs[0], sc)]
            }
            Op::ScatterCols { indices, cols } => {
                let se = self.unary(Op::SelectCols { indices: indices.clone(), cols: *cols }, adj)?;
                vec![(inputs[0], se)]
            }
            Op::Concat { sizes } => {
                let mut offset = 0;
                let mut v = Vec::new();
                for (i, &sz) in sizes.iter().enumerate() {
                    let sl = self.slice(adj, offset, sz)?;
                    let shape = self.g.borrow().nodes[inputs[i]].shape.clone();
                    v.push((inputs[i], self.reshape(&sl, &shape)?));
                    offset += sz;
                }
                v
            }
            Op::Slice { offset, total, .. } => {
                let ps = self.unary(Op::PadScatter { offset: *offset, total: *total }, adj)?;
                let shape = self.g.borrow().nodes[inputs[0]].shape.clone();
                vec![(inputs[0], self.reshape(&ps, &shape)?)]
            }
            Op::PadScatter { offset, .. } => {
                let len = numel(&self.g.borrow().nodes[inputs[0]].shape);
                vec![(inputs[0], self.slice(adj, *offset, len)?)]
            }
            Op::Reshape => {
                let shape = self.g.borrow().nodes[inputs[0]].shape.clone();
                vec![(inputs[0], self.reshape(adj, &shape)?)]
            }
            Op::FlipH { .. } => vec![(inputs[0], self.flip_h(adj)?)],
            Op::Blur { kernel, .. } => vec![(inputs[0], self.blur(adj, kernel)?)],
            Op::ChannelMix { c, h, w, matrix } => {
                let mut t = vec![0.0; c * c];
                for o in 0..*c {
                    for i in 0..*c {
                        t[i * c + o] = matrix[o * c + i];
                    }
                }
                let _ = (h, w);
                vec![(inputs[0], self.channel_mix(adj, &t)?)]
            }
            Op::ChannelAffine { c, hw, scale, .. } => {
                let zeros = vec![0.0; *c];
                let _ = hw;
                vec![(inputs[0], self.channel_affine(adj, scale, &zeros)?)]
            }
            Op::BilinearShift { c, h, w, dx, dy } => {
                let t = self.unary(Op::BilinearShiftT { c: *c, h: *h, w: *w, dx: *dx, dy: *dy }, adj)?;
                vec![(inputs[0], t)]
            }
            Op::BilinearShiftT { c, h, w, dx, dy } => {
                let t = self.unary(Op::BilinearShift { c: *c, h: *h, w: *w, dx: *dx, dy: *dy }, adj)?;
                vec![(inputs[0], t)]
            }
        };
        Ok(contribs)
    }
}

fn out_shape(op: &Op, in_shapes: &[Vec<usize>]) -> Vec<usize> {
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (&in_shapes[0], &in_shapes[1]);
            if numel(a) >= numel(b) {
                a.clone()
            } else {
                b.clone()
            }
        }
        Op::Neg
        | Op::Exp
        | Op::Ln
        | Op::Sqrt
        | Op::Tanh
        | Op::Sigmoid
        | Op::Softplus
        | Op::Relu
        | Op::Clamp { .. }
        | Op::FlipH { .. }
        | Op::Blur { .. }
        | Op::ChannelMix { .. }
        | Op::ChannelAffine { .. }
        | Op::BilinearShift { .. }
        | Op::BilinearShiftT { .. } => in_shapes[0].clone(),
        Op::MatMul { m, n, .. } => vec![*m, *n],
        Op::Transpose { rows, cols } => vec![*cols, *rows],
        Op::Conv2d(m) => vec![m.n, m.co, m.oh, m.ow],
        Op::ConvIGrad(m) => vec![m.n, m.ci, m.h, m.w],
        Op::ConvWGrad(m) => vec![m.co, m.ci, m.kh, m.kw],
        Op::AvgPool(m) => vec![m.n, m.c, m.h / m.k, m.w / m.k],
        Op::AvgUnpool(m) => vec![m.n, m.c, m.h, m.w],
        Op::SumAll => vec![],
        Op::BroadcastAll { len } => vec![*len],
        Op::RowSum { rows, .. } => vec![*rows],
        Op::RowBroadcast { rows, cols } => vec![*rows, *cols],
        Op::ColSum { cols, .. } => vec![*cols],
        Op::ColBroadcast { rows, cols } => vec![*rows, *cols],
        Op::ChannelSum { c, .. } => vec![*c],
        // spatial split is not recoverable from hw alone; callers add this
        // to an NCHW tensor whose shape wins in elementwise ops
        Op::ChannelBroadcast { n, c, hw } => vec![*n, *c, *hw, 1],
        Op::SelectCols { indices, .. } => vec![indices.len()],
        Op::ScatterCols { indices, cols } => vec![indices.len(), *cols],
        Op::Concat { sizes } => vec![sizes.iter().sum()],
        Op::Slice { len, .. } => vec![*len],
        Op::PadScatter { total, .. } => vec![*total],
        Op::Reshape => unreachable!("reshape handled inline"),
        Op::Leaf | Op::Const => unreachable!("leaf/const handled inline"),
    }
}

fn eval_op(g: &Graph, op: &Op, inputs: &[usize]) -> Result<Vec<f64>> {
    let val = |i: usize| -> &[f64] { &g.nodes[inputs[i]].value };
    let out = match op {
        Op::Leaf | Op::Const => unreachable!("leaf/const values are bound, not evaluated"),
        Op::Add => ew(val(0), val(1), |a, b| a + b),
        Op::Sub => ew(val(0), val(1), |a, b| a - b),
        Op::Mul => ew(val(0), val(1), |a, b| a * b),
        Op::Div => ew(val(0), val(1), |a, b| a / b),
        Op::Neg => val(0).iter().map(|x| -x).collect(),
        Op::Exp => val(0).iter().map(|x| x.exp()).collect(),
        Op::Ln => val(0).iter().map(|x| x.ln()).collect(),
        Op::Sqrt => val(0).iter().map(|x| x.sqrt()).collect(),
        Op::Tanh => val(0).iter().map(|x| x.tanh()).collect(),
        Op::Sigmoid => val(0).iter().map(|&x| sigmoid(x)).collect(),
        Op::Softplus => val(0).iter().map(|&x| softplus(x)).collect(),
        Op::Relu => val(0).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        Op::Clamp { lo, hi } => val(0).iter().map(|&x| x.clamp(*lo, *hi)).collect(),
        Op::MatMul { m, k, n } => matmul_kernel(val(0), val(1), *m, *k, *n),
        Op::Transpose { rows, cols } => {
            let x = val(0);
            let mut y = vec![0.0; x.len()];
            for r in 0..*rows {
                for c in 0..*cols {
                    y[c * rows + r] = x[r * cols + c];
                }
            }
            y
        }
        Op::Conv2d(m) => conv2d_kernel(val(0), val(1), m),
        Op::ConvIGrad(m) => conv2d_igrad_kernel(val(0), val(1), m),
        Op::ConvWGrad(m) => conv2d_wgrad_kernel(val(0), val(1), m),
        Op::AvgPool(m) => avg_pool_kernel(val(0), m),
        Op::AvgUnpool(m) => avg_unpool_kernel(val(0), m),
        Op::SumAll => vec![val(0).iter().sum()],
        Op::BroadcastAll { len } => vec![val(0)[0]; *len],
        Op::RowSum { rows, cols } => {
            let x = val(0);
            (0..*rows).map(|r| x[r * cols..(r + 1) * cols].iter().sum()).collect()
        }
        Op::RowBroadcast { rows, cols } => {
            let x = val(0);
            let mut y = Vec::with_capacity(rows * cols);
            for r in 0..*rows {
                for _ in 0..*cols {
                    y.push(x[r]);
                }
            }
            y
        }
        Op::ColSum { rows, cols } => {
            let x = val(0);
            let mut y = vec![0.0; *cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    y[c] += x[r * cols + c];
                }
            }
            y
        }
        Op::ColBroadcast { rows, cols } => {
            let x = val(0);
            let mut y = Vec::with_capacity(rows * cols);
            for _ in 0..*rows {
                y.extend_from_slice(&x[..*cols]);
            }
            y
        }
        Op::ChannelSum { n, c, hw } => {
            let x = val(0);
            let mut y = vec![0.0; *c];
            for b in 0..*n {
                for ch in 0..*c {
                    let base = (b * c + ch) * hw;
                    y[ch] += x[base..base + hw].iter().sum::<f64>();
                }
            }
            y
        }
        Op::ChannelBroadcast { n, c, hw } => {
            let x = val(0);
            let mut y = Vec::with_capacity(n * c * hw);
            for _ in 0..*n {
                for ch in 0..*c {
                    for _ in 0..*hw {
                        y.push(x[ch]);
                    }
                }
            }
            y
        }
        Op::SelectCols { indices, cols } => {
            let x = val(0);
            indices.iter().enumerate().map(|(r, &i)| x[r * cols + i]).collect()
        }
        Op::ScatterCols { indices, cols } => {
            let x = val(0);
            let mut y = vec![0.0; indices.len() * cols];
            for (r, &i) in indices.iter().enumerate() {
                y[r * cols + i] = x[r];
            }
            y
        }
        Op::Concat { .. } => {
            let mut y = Vec::new();
            for i in 0..inputs.len() {
                y.extend_from_slice(val(i));
            }
            y
        }
        Op::Slice { offset, len, .. } => val(0)[*offset..offset + len].to_vec(),
        Op::PadScatter { offset, total } => {
            let x = val(0);
            let mut y = vec![0.0; *total];
            y[*offset..offset + x.len()].copy_from_slice(x);
            y
        }
        Op::Reshape => val(0).to_vec(),
        Op::FlipH { c, h, w } => {
            let x = val(0);
            let mut y = vec![0.0; x.len()];
            for ch in 0..*c {
                for row in 0..*h {
                    let base = (ch * h + row) * w;
                    for col in 0..*w {
                        y[base + col] = x[base + (w - 1 - col)];
                    }
                }
            }
            y
        }
        Op::Blur { c, h, w, kernel } => blur_kernel(val(0), *c, *h, *w, kernel),
        Op::ChannelMix { c, h, w, matrix } => {
            let x = val(0);
            let hw = h * w;
            let mut y = vec![0.0; x.len()];
            for o in 0..*c {
                for i in 0..*c {
                    let m = matrix[o * c + i];
                    if m == 0.0 {
                        continue;
                    }
                    let (ob, ib) = (o * hw, i * hw);
                    for p in 0..hw {
                        y[ob + p] += m * x[ib + p];
                    }
                }
            }
            y
        }
        Op::ChannelAffine { c, hw, scale, bias } => {
            let x = val(0);
            let mut y = Vec::with_capacity(x.len());
            for ch in 0..*c {
                let (s, b) = (scale[ch], bias[ch]);
                for p in 0..*hw {
                    y.push(x[ch * hw + p] * s + b);
                }
            }
            y
        }
        Op::BilinearShift { c, h, w, dx, dy } => bilinear_shift_kernel(val(0), *c, *h, *w, *dx, *dy),
        Op::BilinearShiftT { c, h, w, dx, dy } => bilinear_shift_t_kernel(val(0), *c, *h, *w, *dx, *dy),
    };
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn ew(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        let s = b[0];
        a.iter().map(|&x| f(x, s)).collect()
    } else {
        let s = a[0];
        b.iter().map(|&y| f(s, y)).collect()
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yrow = &mut y[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                yrow[j] += av * brow[j];
            }
        }
    }
    y
}

fn conv2d_kernel(x: &[f64], wt: &[f64], m: &ConvMeta) -> Vec<f64> {
    let mut y = vec![0.0; m.n * m.co * m.oh * m.ow];
    let (s, p) = (m.stride as isize, m.pad as isize);
    for b in 0..m.n {
        for o in 0..m.co {
            let ybase = (b * m.co + o) * m.oh * m.ow;
            for c in 0..m.ci {
                let xbase = (b * m.ci + c) * m.h * m.w;
                for ky in 0..m.kh {
                    for kx in 0..m.kw {
                        let wv = wt[((o * m.ci + c) * m.kh + ky) * m.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..m.oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= m.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * m.w;
                            let yrow = ybase + oy * m.ow;
                            for ox in 0..m.ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= m.w as isize {
                                    continue;
                                }
                                y[yrow + ox] += wv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv2d_igrad_kernel(dy: &[f64], wt: &[f64], m: &ConvMeta) -> Vec<f64> {
    let mut gx = vec![0.0; m.n * m.ci * m.h * m.w];
    let (s, p) = (m.stride as isize, m.pad as isize);
    for b in 0..m.n {
        for o in 0..m.co {
            let ybase = (b * m.co + o) * m.oh * m.ow;
            for c in 0..m.ci {
                let xbase = (b * m.ci + c) * m.h * m.w;
                for ky in 0..m.kh {
                    for kx in 0..m.kw {
                        let wv = wt[((o * m.ci + c) * m.kh + ky) * m.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..m.oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= m.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * m.w;
                            let yrow = ybase + oy * m.ow;
                            for ox in 0..m.ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= m.w as isize {
                                    continue;
                                }
                                gx[xrow + ix as usize] += wv * dy[yrow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv2d_wgrad_kernel(dy: &[f64], x: &[f64], m: &ConvMeta) -> Vec<f64> {
    let mut gw = vec![0.0; m.co * m.ci * m.kh * m.kw];
    let (s, p) = (m.stride as isize, m.pad as isize);
    for b in 0..m.n {
        for o in 0..m.co {
            let ybase = (b * m.co + o) * m.oh * m.ow;
            for c in 0..m.ci {
                let xbase = (b * m.ci + c) * m.h * m.w;
                for ky in 0..m.kh {
                    for kx in 0..m.kw {
                        let mut acc = 0.0;
                        for oy in 0..m.oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= m.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * m.w;
                            let yrow = ybase + oy * m.ow;
                            for ox in 0..m.ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= m.w as isize {
                                    continue;
                                }
                                acc += dy[yrow + ox] * x[xrow + ix as usize];
                            }
                        }
                        gw[((o * m.ci + c) * m.kh + ky) * m.kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

fn avg_pool_kernel(x: &[f64], m: &PoolMeta) -> Vec<f64> {
    let (oh, ow) = (m.h / m.k, m.w / m.k);
    let inv = 1.0 / (m.k * m.k) as f64;
    let mut y = vec![0.0; m.n * m.c * oh * ow];
    for bc in 0..m.n * m.c {
        let xb = bc * m.h * m.w;
        let yb = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..m.k {
                    let row = xb + (oy * m.k + ky) * m.w + ox * m.k;
                    for kx in 0..m.k {
                        acc += x[row + kx];
                    }
                }
                y[yb + oy * ow + ox] = acc * inv;
            }
        }
    }
    y
}

fn avg_unpool_kernel(dy: &[f64], m: &PoolMeta) -> Vec<f64> {
    let (oh, ow) = (m.h / m.k, m.w / m.k);
    let inv = 1.0 / (m.k * m.k) as f64;
    let mut gx = vec![0.0; m.n * m.c * m.h * m.w];
    for bc in 0..m.n * m.c {
        let xb = bc * m.h * m.w;
        let yb = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[yb + oy * ow + ox] * inv;
                for ky in 0..m.k {
                    let row = xb + (oy * m.k + ky) * m.w + ox * m.k;
                    for kx in 0..m.k {
                        gx[row + kx] = g;
                    }
                }
            }
        }
    }
    gx
}

fn blur_kernel(x: &[f64], c: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() as isize / 2;
    let mut tmp = vec![0.0; x.len()];
    // horizontal
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
    // vertical
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

fn bilinear_shift_kernel(x: &[f64], c: usize, h: usize, w: usize, dx: f64, dy: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let get = |ch: usize, row: isize, col: isize| -> f64 {
        if row < 0 || row >= h as isize || col < 0 || col >= w as isize {
            0.0
        } else {
            x[(ch * h + row as usize) * w + col as usize]
        }
    };
    for ch in 0..c {
        for row in 0..h {
            let sy = row as f64 + dy;
            let y0 = sy.floor();
            let fy = sy - y0;
            for col in 0..w {
                let sx = col as f64 + dx;
                let x0 = sx.floor();
                let fx = sx - x0;
                let (iy, ix) = (y0 as isize, x0 as isize);
                let v = (1.0 - fy) * (1.0 - fx) * get(ch, iy, ix)
                    + (1.0 - fy) * fx * get(ch, iy, ix + 1)
                    + fy * (1.0 - fx) * get(ch, iy + 1, ix)
                    + fy * fx * get(ch, iy + 1, ix + 1);
                y[(ch * h + row) * w + col] = v;
            }
        }
    }
    y
}

fn bilinear_shift_t_kernel(g: &[f64], c: usize, h: usize, w: usize, dx: f64, dy: f64) -> Vec<f64> {
    let mut gx = vec![0.0; g.len()];
    for ch in 0..c {
        for row in 0..h {
            let sy = row as f64 + dy;
            let y0 = sy.floor();
            let fy = sy - y0;
            for col in 0..w {
                let sx = col as f64 + dx;
                let x0 = sx.floor();
                let fx = sx - x0;
                let (iy, ix) = (y0 as isize, x0 as isize);
                let gv = g[(ch * h + row) * w + col];
                let mut scatter = |r: isize, cc: isize, wgt: f64| {
                    if r >= 0 && r < h as isize && cc >= 0 && cc < w as isize && wgt != 0.0 {
                        gx[(ch * h + r as usize) * w + cc as usize] += wgt * gv;
                    }
                };
                scatter(iy, ix, (1.0 - fy) * (1.0 - fx));
                scatter(iy, ix + 1, (1.0 - fy) * fx);
                scatter(iy + 1, ix, fy * (1.0 - fx));
                scatter(iy + 1, ix + 1, fy * fx);
            }
        }
    }
    gx
}
