//! Tape-style reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node; inputs always precede the
//! node that consumes them, so replaying the tape backwards in creation order
//! is a valid topological traversal.

use std::ops::Range;
use std::rc::Rc;

use super::kernels::{self, gemm, gemm_view, MatView};
use super::tensor::{numel, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Borrowed(&'a [f64]),
    Owned(Vec<f64>),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Borrowed(s) => s,
            Value::Owned(v) => v,
        }
    }
}

/// One query block attending one key block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnBlock {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

/// Block structure of a batched attention call. Query rows outside every
/// block produce zeros; blocks must not overlap in their query rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub blocks: Vec<AttnBlock>,
    /// Query at block offset `t` sees only keys at block offsets `<= t`.
    pub causal: bool,
}

impl AttnLayout {
    /// Each range attends to itself.
    pub fn self_blocks(ranges: &[Range<usize>], causal: bool) -> Self {
        AttnLayout {
            blocks: ranges
                .iter()
                .map(|r| AttnBlock {
                    q: r.clone(),
                    k: r.clone(),
                })
                .collect(),
            causal,
        }
    }

    fn visible(&self, t: usize, tk: usize) -> usize {
        if self.causal {
            (t + 1).min(tk)
        } else {
            tk
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Gelu {
        a: Var,
    },
    Exp {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttnLayout>,
        probs: Vec<f64>,
    },
    GroupWeightedSum {
        weights: Var,
        rows: Var,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Parameters are borrowed, not copied.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (numel(&shape[..shape.len() - 1]), shape[shape.len() - 1]),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Copies a node out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves ---------------------------------------------------------

    /// Trainable leaf borrowing the tensor's storage.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Non-trainable leaf borrowing the tensor's storage.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `requires_grad` makes it a differentiable input.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return contract(format!("input shape {shape:?} vs {} values", data.len()));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` (or `a · bᵀ` when `trans_b`), both 2-D.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return contract(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return contract(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.value(bias).len() != cols {
            return contract(format!(
                "add_row: bias of {} values for rows of {cols}",
                self.value(bias).len()
            ));
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, factor }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Exp { a }, rg)
    }

    // ---- normalisation --------------------------------------------------

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return contract(format!("layer_norm: gain/bias must have {cols} values"));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- indexing / structure -------------------------------------------

    /// Selects rows of a 2-D node; repeated indices are allowed.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(src));
        if idx.is_empty() {
            return contract("gather_rows with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return contract(format!("gather_rows index {bad} out of {rows} rows"));
        }
        let sv = self.value(src);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&sv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows { src, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Stacks 2-D nodes with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows with no parts");
        };
        let (_, cols) = rows_cols(self.shape(first));
        let mut total = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return contract(format!("concat_rows: {c} columns vs {cols}"));
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![total, cols], out, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return contract(format!(
                "reshape {:?} -> {shape:?} changes the element count",
                self.shape(a)
            ));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape { a }, rg))
    }

    // ---- softmax family -------------------------------------------------

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        out.chunks_mut(cols).for_each(kernels::softmax_in_place);
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a }, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        out.chunks_mut(cols).for_each(kernels::log_softmax_in_place);
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax { a }, rg)
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` as a `[1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if targets.len() != rows || weights.len() != rows {
            return contract(format!(
                "cross_entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidArgument(format!(
                "target {t} out of range for {cols} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            let lse = kernels::logsumexp(row);
            loss += weights[r] * (lse - row[targets[r]]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    // ---- fused blocks ---------------------------------------------------

    /// Multi-head scaled dot-product attention over row blocks.
    ///
    /// `q: [Nq, d]`, `k, v: [Nk, d]`; heads split `d` into equal column slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttnLayout>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return contract(format!("attention shapes q {sq:?} k {sk:?} v {sv:?}"));
        }
        let (nq, d, nk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || d % heads != 0 {
            return contract(format!("{heads} heads do not divide width {d}"));
        }
        let mut seen = vec![false; nq];
        for b in &layout.blocks {
            if b.q.end > nq || b.k.end > nk || b.q.is_empty() || b.k.is_empty() {
                return contract(format!("attention block {b:?} out of range ({nq}x{nk})"));
            }
            for i in b.q.clone() {
                if std::mem::replace(&mut seen[i], true) {
                    return contract(format!("query row {i} appears in two attention blocks"));
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; nq * d];
        let total: usize = layout.blocks.iter().map(|b| b.q.len() * b.k.len()).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut off = 0;
        for b in &layout.blocks {
            let (tq, tk) = (b.q.len(), b.k.len());
            for h in 0..heads {
                let p = &mut probs[off..off + tq * tk];
                gemm_view(
                    tq,
                    dh,
                    tk,
                    qv,
                    MatView {
                        offset: b.q.start * d + h * dh,
                        rs: d,
                        cs: 1,
                    },
                    kv,
                    MatView {
                        offset: b.k.start * d + h * dh,
                        rs: 1,
                        cs: d,
                    },
                    0.0,
                    p,
                    MatView::dense(tk),
                );
                for t in 0..tq {
                    let row = &mut p[t * tk..(t + 1) * tk];
                    let vis = layout.visible(t, tk);
                    row[..vis].iter_mut().for_each(|x| *x *= scale);
                    kernels::softmax_in_place(&mut row[..vis]);
                    row[vis..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_view(
                    tq,
                    tk,
                    dh,
                    p,
                    MatView::dense(tk),
                    vv,
                    MatView {
                        offset: b.k.start * d + h * dh,
                        rs: d,
                        cs: 1,
                    },
                    0.0,
                    &mut out,
                    MatView {
                        offset: b.q.start * d + h * dh,
                        rs: d,
                        cs: 1,
                    },
                );
                off += tq * tk;
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// For `weights: [B, g]` and `rows: [B·g, d]`, returns `[B, d]` where
    /// output row `b` is `Σ_i weights[b, i] · rows[b·g + i]`.
    pub fn group_weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (sw, sr) = (self.shape(weights), self.shape(rows));
        if sw.len() != 2 || sr.len() != 2 || sw[0] * sw[1] != sr[0] {
            return contract(format!("group_weighted_sum shapes {sw:?} and {sr:?}"));
        }
        let (b, g, d) = (sw[0], sw[1], sr[1]);
        let (wv, rv) = (self.value(weights), self.value(rows));
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for i in 0..g {
                let w = wv[bi * g + i];
                let r = &rv[(bi * g + i) * d..(bi * g + i + 1) * d];
                o.iter_mut().zip(r).for_each(|(x, y)| *x += w * y);
            }
        }
        let rg = self.rg(&[weights, rows]);
        Ok(self.push(vec![b, d], out, Op::GroupWeightedSum { weights, rows }, rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from a single-element node. Every leaf that requires a
    /// gradient gets one; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "node {} has not been computed on this graph ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.as_slice().len()]);
            }
        }
        // Leaves created after the loss cannot influence it.
        for node in &self.nodes[loss.0 + 1..] {
            let z = (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| vec![0.0; node.value.as_slice().len()]);
            grads.push(z);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.as_slice().len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, self.value(*b), !trans_b, 1.0, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    if *trans_b {
                        // B is [n,k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, self.value(*a), false, 1.0, gb);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, self.value(*a), true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
                let cols = self.value(*bias).len();
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let bv = self.value(*b);
                    ga.iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(x, (gg, y))| *x += gg * y);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let av = self.value(*a);
                    gb.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(x, (gg, y))| *x += gg * y);
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gg)| *x += gg * factor);
                }
            }
            Op::Gelu { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let av = self.value(*a);
                    ga.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(x, (gg, &y))| *x += gg * kernels::gelu_grad(y));
                }
            }
            Op::Exp { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(x, (gg, y))| *x += gg * y);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gv = self.value(*gain);
                if let Some(ggain) = self.grad_slot(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            ggain[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gbias) = self.grad_slot(grads, *bias) {
                    for row in g.chunks(cols) {
                        add_into(gbias, row);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let k = rstd[r] / n;
                        let gxr = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gxr[c] += k * (n * dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let cols = node.shape[1];
                if let Some(gs) = self.grad_slot(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Softmax { a } => {
                let (_, cols) = rows_cols(&node.shape);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            dst[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let (_, cols) = rows_cols(&node.shape);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dst[c] += gr[c] - yr[c].exp() * gsum;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (_, cols) = rows_cols(self.shape(*logits));
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, (pr, dst)) in probs.chunks(cols).zip(gl.chunks_mut(cols)).enumerate() {
                        let w = g[0] * weights[r];
                        for c in 0..cols {
                            dst[c] += w * pr[c];
                        }
                        dst[targets[r]] -= w;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, layout, probs, grads),
            Op::GroupWeightedSum { weights, rows } => {
                let (b, gsz) = (self.shape(*weights)[0], self.shape(*weights)[1]);
                let d = self.shape(*rows)[1];
                let rv = self.value(*rows);
                let wv = self.value(*weights);
                if let Some(gw) = self.grad_slot(grads, *weights) {
                    for bi in 0..b {
                        let go = &g[bi * d..(bi + 1) * d];
                        for i in 0..gsz {
                            let r = &rv[(bi * gsz + i) * d..(bi * gsz + i + 1) * d];
                            gw[bi * gsz + i] += go.iter().zip(r).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gr) = self.grad_slot(grads, *rows) {
                    for bi in 0..b {
                        let go = &g[bi * d..(bi + 1) * d];
                        for i in 0..gsz {
                            let w = wv[bi * gsz + i];
                            let dst = &mut gr[(bi * gsz + i) * d..(bi * gsz + i + 1) * d];
                            dst.iter_mut().zip(go).for_each(|(x, y)| *x += w * y);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        // Separate accumulators: q, k, v may alias the same node.
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gvv = vec![0.0; vv.len()];
        let mut off = 0;
        for b in &layout.blocks {
            let (tq, tk) = (b.q.len(), b.k.len());
            let mut dp = vec![0.0; tq * tk];
            for h in 0..heads {
                let p = &probs[off..off + tq * tk];
                let gview = MatView {
                    offset: b.q.start * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                let kview = MatView {
                    offset: b.k.start * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                // dV += Pᵀ · dOut
                gemm_view(tk, tq, dh, p, MatView::dense_t(tk), g, gview, 1.0, &mut gvv, kview);
                // dP = dOut · Vᵀ
                gemm_view(
                    tq,
                    dh,
                    tk,
                    g,
                    gview,
                    vv,
                    MatView {
                        offset: kview.offset,
                        rs: 1,
                        cs: d,
                    },
                    0.0,
                    &mut dp,
                    MatView::dense(tk),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
                for t in 0..tq {
                    let pr = &p[t * tk..(t + 1) * tk];
                    let dr = &mut dp[t * tk..(t + 1) * tk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                    for j in 0..tk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ += dS · K ; dK += dSᵀ · Q
                gemm_view(tq, tk, dh, &dp, MatView::dense(tk), kv, kview, 1.0, &mut gq, gview);
                gemm_view(tk, tq, dh, &dp, MatView::dense_t(tk), qv, gview, 1.0, &mut gk, kview);
                off += tq * tk;
            }
        }
        for (var, acc) in [(q, gq), (k, gk), (v, gvv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                add_into(slot, &acc);
            }
        }
    }
}
