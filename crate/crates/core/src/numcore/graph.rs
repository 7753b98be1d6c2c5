//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already a topological order and the
//! backward sweep is a single reverse scan.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{
    gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, layer_norm_rows, log_sum_exp, rope_in_place,
    softmax_row_into, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Embedding(Var, Rc<Vec<u32>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    SelectRows {
        when_true: Var,
        when_false: Var,
        pick: Rc<Vec<bool>>,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<u32>>,
        include: Rc<Vec<bool>>,
        probs: Vec<f64>,
        count: usize,
    },
    Rope {
        x: Var,
        positions: Rc<Vec<f64>>,
        head_dim: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding(..) => "embedding",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Rope { .. } => "rope",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_lookup: Vec<Option<Var>>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_finite_checks(true)
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: Vec::new(),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// A differentiable input.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape. Frozen parameters enter as
    /// constants. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_lookup.get(id.index()) {
            return *v;
        }
        let p = store.get(id);
        let v = if p.trainable {
            self.variable(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        if self.param_lookup.len() <= id.index() {
            self.param_lookup.resize(id.index() + 1, None);
        }
        self.param_lookup[id.index()] = Some(v);
        if p.trainable {
            self.params.push((id, v));
        }
        v
    }

    /// Parameters that entered this graph as differentiable leaves.
    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// Stop-gradient: the returned node carries the same value but nothing
    /// flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", format!("{m}x{n} + row of {}", self.value(row).len())));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul", "operand shapes differ"));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a fixed (non-differentiable) array, e.g. a
    /// dropout mask.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape("mul_const", "mask length differs from operand"));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::MulConst(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Row softmax restricted to entries whose flag in `visible` (row-major,
    /// same shape as `a`) is true. Hidden entries get probability zero.
    pub fn masked_softmax_rows(&mut self, a: Var, visible: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(mask) = &visible {
            if mask.len() != m * n {
                return Err(Error::shape("softmax_rows", "mask size differs from input"));
            }
        }
        if self.check_finite && !self.value(a).is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let vis = visible.as_ref().map(|mk| &mk[i * n..(i + 1) * n]);
            softmax_row_into(&x[i * n..(i + 1) * n], vis, &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", "gain/bias width differs from input"));
        }
        let (out, stats) = layer_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            m,
            n,
        );
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        )
    }

    /// Gathers rows of `table` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        let t = self.value(table).data();
        for &id in ids {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, size: v as u32 });
            }
            out.extend_from_slice(&t[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding(table, Rc::new(ids.to_vec())),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        }
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("concat_rows", format!("width {pn} vs {n}")));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", format!("[{start}, {}) of {m}", start + len)));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols(a, start), rg)
    }

    /// Output row `r` is row `index[r]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if index.is_empty() || index.iter().any(|&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("index outside {m} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![index.len(), n], out)?,
            Op::GatherRows(a, Rc::new(index.to_vec())),
            rg,
        )
    }

    /// Row `i` comes from `when_true` where `pick[i]`, otherwise from `when_false`.
    pub fn select_rows(&mut self, when_true: Var, when_false: Var, pick: Rc<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.dims(when_true);
        if self.dims(when_false) != (m, n) || pick.len() != m {
            return Err(Error::shape("select_rows", "operands or pick mask disagree"));
        }
        let (t, f) = (self.value(when_true).data(), self.value(when_false).data());
        let mut out = Vec::with_capacity(m * n);
        for (i, &p) in pick.iter().enumerate() {
            let src = if p { t } else { f };
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[when_true, when_false]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::SelectRows {
                when_true,
                when_false,
                pick,
            },
            rg,
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; n];
        let src = self.value(a).data();
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean negative log-likelihood of `targets` over rows with `include`
    /// set. Excluded rows receive exactly zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], include: &[bool]) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t || include.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} rows, {} targets, {} mask", targets.len(), include.len()),
            ));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..t {
            if !include[i] {
                continue;
            }
            let tgt = targets[i] as usize;
            if tgt >= v {
                return Err(Error::TokenOutOfRange {
                    id: targets[i],
                    size: v as u32,
                });
            }
            let row = &x[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[tgt];
            for (p, &r) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (r - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::AllMasked);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
                include: Rc::new(include.to_vec()),
                probs,
                count,
            },
            rg,
        )
    }

    /// Rotary embedding over each `head_dim`-wide block of the columns.
    pub fn rope(&mut self, x: Var, positions: Rc<Vec<f64>>, head_dim: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if positions.len() != m || !head_dim.is_multiple_of(2) || n % head_dim != 0 {
            return Err(Error::shape("rope", format!("{m}x{n} with head_dim {head_dim}")));
        }
        let mut out = self.value(x).data().to_vec();
        rope_in_place(&mut out, &positions, n, head_dim, 1.0);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Rope {
                x,
                positions,
                head_dim,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // accumulation buffer for an input, created on first touch
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        let val = |v: Var| nodes[v.0].value.data();
        let dims = |v: Var| nodes[v.0].value.dims2();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc(grads, nodes, *a) {
                    gemm_nt(g, bv, ga, m, n, k);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).0;
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc(grads, nodes, *a) {
                    gemm_nn(g, bv, ga, m, n, k);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    gemm_tn(g, av, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(grads, nodes, v) {
                        for (x, y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = dims(*a);
                if let Some(ga) = acc(grads, nodes, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gr) = acc(grads, nodes, *row) {
                    for i in 0..m {
                        for (x, y) in gr.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc(grads, nodes, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * z;
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * z;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = acc(grads, nodes, *a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(c.iter()) {
                        *x += y * z;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                if let Some(ga) = acc(grads, nodes, *a) {
                    for ((x, y), &z) in ga.iter_mut().zip(g).zip(av) {
                        *x += y * gelu_grad(z);
                    }
                }
            }
            Op::Softmax(a) => {
                let (m, n) = dims(*a);
                let y = node.value.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (m, n) = dims(*x);
                let xv = val(*x);
                let gv = val(*gain);
                let xhat = |i: usize, j: usize| (xv[i * n + j] - stats[i].0) * stats[i].1;
                if let Some(gg) = acc(grads, nodes, *gain) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat(i, j);
                        }
                    }
                }
                if let Some(gb) = acc(grads, nodes, *bias) {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                if let Some(gx) = acc(grads, nodes, *x) {
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat(i, j);
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            gx[i * n + j] += stats[i].1 * (d - mean_d - xhat(i, j) * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = dims(*table).1;
                if let Some(gt) = acc(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for (x, y) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = acc(grads, nodes, p) {
                        for (x, y) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut col = 0;
                for &p in parts {
                    let w = dims(p).1;
                    if let Some(gp) = acc(grads, nodes, p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = dims(*a).1;
                if let Some(ga) = acc(grads, nodes, *a) {
                    for (x, y) in ga[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let n = dims(*a).1;
                let (m, len) = node.value.dims2();
                if let Some(ga) = acc(grads, nodes, *a) {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, index) => {
                let n = dims(*a).1;
                if let Some(ga) = acc(grads, nodes, *a) {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SelectRows {
                when_true,
                when_false,
                pick,
            } => {
                let n = dims(*when_true).1;
                for (v, want) in [(*when_true, true), (*when_false, false)] {
                    if let Some(gv) = acc(grads, nodes, v) {
                        for (i, &p) in pick.iter().enumerate() {
                            if p == want {
                                for j in 0..n {
                                    gv[i * n + j] += g[i * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = dims(*a);
                if let Some(ga) = acc(grads, nodes, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / m as f64;
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
            Op::CrossEntropy {
                logits,
                targets,
                include,
                probs,
                count,
            } => {
                let v = dims(*logits).1;
                let scale = g[0] / *count as f64;
                if let Some(gl) = acc(grads, nodes, *logits) {
                    for (i, &inc) in include.iter().enumerate() {
                        if !inc {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += scale * probs[i * v + j];
                        }
                        gl[i * v + targets[i] as usize] -= scale;
                    }
                }
            }
            Op::Rope {
                x,
                positions,
                head_dim,
            } => {
                let n = dims(*x).1;
                if let Some(gx) = acc(grads, nodes, *x) {
                    let mut back = g.to_vec();
                    rope_in_place(&mut back, positions, n, *head_dim, -1.0);
                    for (a, b) in gx.iter_mut().zip(back) {
                        *a += b;
                    }
                }
            }
        }
    }
}
