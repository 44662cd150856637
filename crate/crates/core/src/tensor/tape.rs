use std::cell::{Ref, RefCell};

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{MuseError, Result};

/// Precomputed local gradients for fused loss ops. Each entry pairs an input
/// node with d(loss)/d(input); backward scales them by the upstream scalar.
type LocalGrads = Vec<(usize, Vec<f64>)>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    GatherRows(usize, Vec<usize>),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    Reshape(usize),
    BlockMean {
        x: usize,
        block: usize,
        skip: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        block: usize,
        probs: Vec<f64>,
    },
    ExchangeInto {
        target: usize,
        source: usize,
        selected: Vec<Vec<usize>>,
        block_target: usize,
        block_source: usize,
    },
    Fused(&'static str, LocalGrads),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::BlockMean { .. } => "block_mean",
            Op::Attention { .. } => "attention",
            Op::ExchangeInto { .. } => "exchange",
            Op::Fused(name, _) => name,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order so they can be replayed backwards.
///
/// Nodes are appended only after their inputs exist, so the node list is
/// always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros if `var` did not
    /// influence the root.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = &self.shapes[var.id];
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads[var.id].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let needs = tensor.requires_grad;
        let mut value =
            Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("valid tensor");
        value.requires_grad = needs;
        self.push(value, Op::Leaf, needs)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        let mut tensor = tensor;
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    /// Records a trainable leaf, taking ownership of the data.
    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        let mut tensor = tensor;
        tensor.requires_grad = true;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, true)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// The first node whose value holds a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Replays the tape backwards from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(MuseError::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let n = root.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        // Intermediate gradients are kept; only shapes are needed alongside.
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn acc<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let p = nodes[*b].value.cols();
            if nodes[*a].needs_grad {
                let bv = nodes[*b].value.data();
                let ga = acc(grads, nodes, *a).unwrap();
                gemm_nt(g, bv, m, p, k, ga);
            }
            if nodes[*b].needs_grad {
                let av = nodes[*a].value.data();
                let gb = acc(grads, nodes, *b).unwrap();
                gemm_tn(av, g, m, k, p, gb);
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(ga) = acc(grads, nodes, id) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                let bv = nodes[*b].value.data();
                let ga = acc(grads, nodes, *a).unwrap();
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *x += gi * bi;
                }
            }
            if nodes[*b].needs_grad {
                let av = nodes[*a].value.data();
                let gb = acc(grads, nodes, *b).unwrap();
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *x += gi * ai;
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            let cols = nodes[*bias].value.numel();
            if let Some(gb) = acc(grads, nodes, *bias) {
                for row in g.chunks(cols) {
                    for (x, y) in gb.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += s * y;
                }
            }
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                    *x += y * kernels::gelu_grad(*v);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let cols = node.value.cols();
            let s = node.value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((gr, sr), out) in g.chunks(cols).zip(s.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dotp = kernels::dot(gr, sr);
                    for c in 0..cols {
                        out[c] += sr[c] * (gr[c] - dotp);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
        } => {
            let d = node.value.cols();
            let gam = nodes[*gamma].value.data();
            if nodes[*gamma].needs_grad {
                let gg = acc(grads, nodes, *gamma).unwrap();
                for (gr, hr) in g.chunks(d).zip(x_hat.chunks(d)) {
                    for c in 0..d {
                        gg[c] += gr[c] * hr[c];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for gr in g.chunks(d) {
                    for c in 0..d {
                        gb[c] += gr[c];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut dh = vec![0.0; d];
                for (r, (gr, hr)) in g.chunks(d).zip(x_hat.chunks(d)).enumerate() {
                    for c in 0..d {
                        dh[c] = gr[c] * gam[c];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = kernels::dot(&dh, hr) / d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for c in 0..d {
                        out[c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel().max(1) as f64;
            if let Some(ga) = acc(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0] / n;
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let cols = node.value.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (out_r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * cols..(src + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(&g[out_r * cols..(out_r + 1) * cols]) {
                        *x += y;
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = nodes[*a].value.cols();
            let cb = nodes[*b].value.cols();
            let c = ca + cb;
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, row) in g.chunks(c).enumerate() {
                    for (x, y) in ga[r * ca..(r + 1) * ca].iter_mut().zip(&row[..ca]) {
                        *x += y;
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (r, row) in g.chunks(c).enumerate() {
                    for (x, y) in gb[r * cb..(r + 1) * cb].iter_mut().zip(&row[ca..]) {
                        *x += y;
                    }
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[*a].value.numel();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (x, y) in ga.iter_mut().zip(&g[..split]) {
                    *x += y;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (x, y) in gb.iter_mut().zip(&g[split..]) {
                    *x += y;
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Op::BlockMean { x, block, skip } => {
            let cols = node.value.cols();
            let count = (block - skip) as f64;
            if let Some(gx) = acc(grads, nodes, *x) {
                for (b, gr) in g.chunks(cols).enumerate() {
                    for r in b * block + skip..(b + 1) * block {
                        for (xv, y) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *xv += y / count;
                        }
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            block,
            probs,
        } => attention_backward(nodes, node, g, grads, (*q, *k, *v), *heads, *block, probs),
        Op::ExchangeInto {
            target,
            source,
            selected,
            block_target,
            block_source,
        } => {
            let cols = node.value.cols();
            if let Some(gt) = acc(grads, nodes, *target) {
                for (x, y) in gt.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if let Some(gs) = acc(grads, nodes, *source) {
                let count = (block_source - 1) as f64;
                let mut summed = vec![0.0; cols];
                for (b, sel) in selected.iter().enumerate() {
                    if sel.is_empty() {
                        continue;
                    }
                    summed.fill(0.0);
                    for &k in sel {
                        let r = b * block_target + k;
                        for (s, y) in summed.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *s += y;
                        }
                    }
                    for j in 1..*block_source {
                        let r = b * block_source + j;
                        for (x, s) in gs[r * cols..(r + 1) * cols].iter_mut().zip(&summed) {
                            *x += s / count;
                        }
                    }
                }
            }
        }
        Op::Fused(_, locals) => {
            for (id, local) in locals {
                if let Some(ga) = acc(grads, nodes, *id) {
                    for (x, l) in ga.iter_mut().zip(local) {
                        *x += g[0] * l;
                    }
                }
            }
        }
    }
}

fn head_slice(
    src: &[f64],
    rows: std::ops::Range<usize>,
    d: usize,
    h: usize,
    dh: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for r in rows {
        out.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn head_scatter_add(dst: &mut [f64], src: &[f64], row0: usize, d: usize, h: usize, dh: usize) {
    for (i, chunk) in src.chunks(dh).enumerate() {
        let base = (row0 + i) * d + h * dh;
        for (x, y) in dst[base..base + dh].iter_mut().zip(chunk) {
            *x += y;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    block: usize,
    probs: &[f64],
) {
    let d = node.value.cols();
    let dh = d / heads;
    let rows = node.value.rows();
    let blocks = rows / block;
    let scale = 1.0 / (dh as f64).sqrt();
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    for b in 0..blocks {
        let range = b * block..(b + 1) * block;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * block * block..(b * heads + h + 1) * block * block];
            let go = head_slice(g, range.clone(), d, h, dh);
            let qh = head_slice(qv, range.clone(), d, h, dh);
            let kh = head_slice(kv, range.clone(), d, h, dh);
            let vh = head_slice(vv, range.clone(), d, h, dh);
            // dV = Pᵀ dO
            let mut dvh = vec![0.0; block * dh];
            gemm_tn(p, &go, block, block, dh, &mut dvh);
            // dP = dO Vᵀ
            let mut dp = vec![0.0; block * block];
            gemm_nt(&go, &vh, block, dh, block, &mut dp);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√d_k scale
            for r in 0..block {
                let pr = &p[r * block..(r + 1) * block];
                let dpr = &mut dp[r * block..(r + 1) * block];
                let s = kernels::dot(pr, dpr);
                for c in 0..block {
                    dpr[c] = pr[c] * (dpr[c] - s) * scale;
                }
            }
            let mut dqh = vec![0.0; block * dh];
            gemm_nn(&dp, &kh, block, block, dh, &mut dqh);
            let mut dkh = vec![0.0; block * dh];
            gemm_tn(&dp, &qh, block, block, dh, &mut dkh);
            head_scatter_add(&mut dq, &dqh, range.start, d, h, dh);
            head_scatter_add(&mut dk, &dkh, range.start, d, h, dh);
            head_scatter_add(&mut dv, &dvh, range.start, d, h, dh);
        }
    }
    for (id, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(ga) = acc(grads, nodes, id) {
            for (x, y) in ga.iter_mut().zip(&local) {
                *x += y;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        let v = self.value();
        Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("valid tensor")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().add(&other.value())?;
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return Err(MuseError::Shape {
                    op: "mul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = bias.value();
            let cols = a.cols();
            if b.numel() != cols {
                return Err(MuseError::Shape {
                    op: "add_row",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(cols) {
                for (x, y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(bias, value, Op::AddRow(self.id, bias.id)))
    }

    /// `self · w + b`
    pub fn affine(&self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul(w)?.add_row(b)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let value = self.value().scale(s);
        self.unary(value, Op::Scale(self.id, s))
    }

    pub fn gelu(&self) -> Var<'t> {
        let value = self.value().map(kernels::gelu);
        self.unary(value, Op::Gelu(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let value = self.value().softmax_rows();
        self.unary(value, Op::SoftmaxRows(self.id))
    }

    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (ln, shape) = {
            let x = self.value();
            let gv = gamma.value();
            let bv = beta.value();
            let d = x.cols();
            if gv.numel() != d || bv.numel() != d {
                return Err(MuseError::Shape {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
            (
                kernels::layer_norm(x.data(), gv.data(), bv.data(), d, eps),
                x.shape().to_vec(),
            )
        };
        let needs = self.tape.needs(&[self.id, gamma.id, beta.id]);
        let value = Tensor::new(shape, ln.out)?;
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                x_hat: ln.x_hat,
                inv_std: ln.inv_std,
            },
            needs,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let (s, n) = {
            let v = self.value();
            (v.data().iter().sum::<f64>(), v.numel())
        };
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Output row `i` is input row `indices[i]`; backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let rows = a.rows();
            let cols = a.cols();
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(MuseError::Index {
                        what: "gather_rows",
                        index: i,
                        bound: rows,
                    });
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![indices.len(), cols], data)?
        };
        Ok(self.unary(value, Op::GatherRows(self.id, indices.to_vec())))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            if a.rows() != b.rows() {
                return Err(MuseError::Shape {
                    op: "concat_cols",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for r in 0..a.rows() {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::new(vec![a.rows(), a.cols() + b.cols()], data)?
        };
        Ok(self.binary(other, value, Op::ConcatCols(self.id, other.id)))
    }

    /// Stacks `other`'s rows below `self`'s.
    pub fn concat_rows(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            if a.cols() != b.cols() {
                return Err(MuseError::Shape {
                    op: "concat_rows",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)?
        };
        Ok(self.binary(other, value, Op::ConcatRows(self.id, other.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Mean over rows `skip..block` of each consecutive `block`-row group.
    pub fn block_mean(&self, block: usize, skip: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let rows = a.rows();
            if block == 0 || skip >= block || !rows.is_multiple_of(block) {
                return Err(MuseError::contract(format!(
                    "block_mean: block {block}, skip {skip} incompatible with {rows} rows"
                )));
            }
            let cols = a.cols();
            let count = (block - skip) as f64;
            let mut data = vec![0.0; rows / block * cols];
            for (b, out) in data.chunks_mut(cols).enumerate() {
                for r in b * block + skip..(b + 1) * block {
                    for (o, x) in out.iter_mut().zip(a.row(r)) {
                        *o += x;
                    }
                }
                for o in out.iter_mut() {
                    *o /= count;
                }
            }
            Tensor::new(vec![rows / block, cols], data)?
        };
        Ok(self.unary(
            value,
            Op::BlockMean {
                x: self.id,
                block,
                skip,
            },
        ))
    }

    /// Scaled dot-product attention over independent `block`-row groups,
    /// with `heads` column groups per head. Returns the attended values; the
    /// probabilities are kept on the tape (see [`Var::attention_probs`]).
    pub fn attention(&self, k: Var<'t>, v: Var<'t>, heads: usize, block: usize) -> Result<Var<'t>> {
        let (value, probs) = {
            let qv = self.value();
            let kv = k.value();
            let vv = v.value();
            if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
                return Err(MuseError::Shape {
                    op: "attention",
                    lhs: qv.shape().to_vec(),
                    rhs: kv.shape().to_vec(),
                });
            }
            let d = qv.cols();
            let rows = qv.rows();
            if heads == 0 || !d.is_multiple_of(heads) {
                return Err(MuseError::config(
                    "heads",
                    format!("dimension {d} not divisible by {heads} heads"),
                ));
            }
            if block == 0 || !rows.is_multiple_of(block) {
                return Err(MuseError::contract(format!(
                    "attention: block {block} does not divide {rows} rows"
                )));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let blocks = rows / block;
            let mut out = vec![0.0; rows * d];
            let mut probs = vec![0.0; blocks * heads * block * block];
            for b in 0..blocks {
                let range = b * block..(b + 1) * block;
                for h in 0..heads {
                    let qh = head_slice(qv.data(), range.clone(), d, h, dh);
                    let kh = head_slice(kv.data(), range.clone(), d, h, dh);
                    let vh = head_slice(vv.data(), range.clone(), d, h, dh);
                    let p = &mut probs
                        [(b * heads + h) * block * block..(b * heads + h + 1) * block * block];
                    gemm_nt(&qh, &kh, block, dh, block, p);
                    for x in p.iter_mut() {
                        *x *= scale;
                    }
                    kernels::softmax_rows_in_place(p, block);
                    let mut oh = vec![0.0; block * dh];
                    gemm_nn(p, &vh, block, block, dh, &mut oh);
                    head_scatter_add(&mut out, &oh, range.start, d, h, dh);
                }
            }
            (Tensor::new(qv.shape().to_vec(), out)?, probs)
        };
        let needs = self.tape.needs(&[self.id, k.id, v.id]);
        Ok(self.tape.push(
            value,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                block,
                probs,
            },
            needs,
        ))
    }

    /// Attention probabilities laid out `[block][head][row][col]`, if this
    /// var was produced by [`Var::attention`].
    pub fn attention_probs(&self) -> Option<(Vec<f64>, usize, usize)> {
        let nodes = self.tape.nodes.borrow();
        match &nodes[self.id].op {
            Op::Attention {
                probs,
                heads,
                block,
                ..
            } => Some((probs.clone(), *heads, *block)),
            _ => None,
        }
    }

    /// For each block `b`, adds the mean of `source`'s non-first rows of block
    /// `b` to the rows of `self` listed in `selected[b]`. Other rows pass
    /// through untouched.
    pub fn exchange_into(
        &self,
        source: Var<'t>,
        selected: &[Vec<usize>],
        block_target: usize,
        block_source: usize,
    ) -> Result<Var<'t>> {
        let value = {
            let t = self.value();
            let s = source.value();
            let cols = t.cols();
            if s.cols() != cols {
                return Err(MuseError::Shape {
                    op: "exchange",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            if block_source < 2 || block_target == 0 {
                return Err(MuseError::contract(
                    "exchange: blocks must hold a cls row and at least one token",
                ));
            }
            let blocks = t.rows() / block_target;
            if !t.rows().is_multiple_of(block_target)
                || s.rows() != blocks * block_source
                || selected.len() != blocks
            {
                return Err(MuseError::contract(format!(
                    "exchange: {} target rows / {} source rows / {} selections inconsistent with blocks {block_target}, {block_source}",
                    t.rows(),
                    s.rows(),
                    selected.len()
                )));
            }
            let mut data = t.data().to_vec();
            let mut mean = vec![0.0; cols];
            for (b, sel) in selected.iter().enumerate() {
                if sel.is_empty() {
                    continue;
                }
                mean.fill(0.0);
                for j in 1..block_source {
                    for (m, x) in mean.iter_mut().zip(s.row(b * block_source + j)) {
                        *m += x;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= (block_source - 1) as f64;
                }
                for &k in sel {
                    if k == 0 || k >= block_target {
                        return Err(MuseError::contract(format!(
                            "exchange: selected index {k} must lie in 1..{block_target}"
                        )));
                    }
                    let r = b * block_target + k;
                    for (x, m) in data[r * cols..(r + 1) * cols].iter_mut().zip(&mean) {
                        *x += m;
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.binary(
            source,
            value,
            Op::ExchangeInto {
                target: self.id,
                source: source.id,
                selected: selected.to_vec(),
                block_target,
                block_source,
            },
        ))
    }

    /// Records a scalar computed outside the tape along with its local
    /// gradients w.r.t. the listed inputs.
    pub(crate) fn fused_scalar(
        tape: &'t Tape,
        name: &'static str,
        value: f64,
        locals: Vec<(Var<'t>, Vec<f64>)>,
    ) -> Var<'t> {
        let ids: Vec<usize> = locals.iter().map(|(v, _)| v.id).collect();
        let needs = tape.needs(&ids);
        let locals = locals.into_iter().map(|(v, g)| (v.id, g)).collect();
        tape.push(Tensor::scalar(value), Op::Fused(name, locals), needs)
    }

    /// Mean negative log-softmax of the target class over unmasked rows.
    /// With every row masked the result is 0 and no gradient flows.
    pub fn cross_entropy(&self, targets: &[usize], mask: Option<&[bool]>) -> Result<Var<'t>> {
        let (loss, local) = {
            let logits = self.value();
            let rows = logits.rows();
            let classes = logits.cols();
            if targets.len() != rows {
                return Err(MuseError::Shape {
                    op: "cross_entropy",
                    lhs: logits.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            if let Some(m) = mask {
                if m.len() != rows {
                    return Err(MuseError::Shape {
                        op: "cross_entropy mask",
                        lhs: vec![rows],
                        rhs: vec![m.len()],
                    });
                }
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
                return Err(MuseError::Index {
                    what: "cross_entropy target",
                    index: bad,
                    bound: classes,
                });
            }
            let active = |r: usize| mask.is_none_or(|m| m[r]);
            let count = (0..rows).filter(|&r| active(r)).count();
            let mut local = vec![0.0; logits.numel()];
            let mut loss = 0.0;
            if count > 0 {
                for r in 0..rows {
                    if !active(r) {
                        continue;
                    }
                    let row = logits.row(r);
                    let lse = kernels::log_sum_exp(row);
                    loss += lse - row[targets[r]];
                    let out = &mut local[r * classes..(r + 1) * classes];
                    for c in 0..classes {
                        out[c] = (row[c] - lse).exp() / count as f64;
                    }
                    out[targets[r]] -= 1.0 / count as f64;
                }
                loss /= count as f64;
            }
            (loss, local)
        };
        Ok(Var::fused_scalar(
            self.tape,
            "cross_entropy",
            loss,
            vec![(*self, local)],
        ))
    }
}
