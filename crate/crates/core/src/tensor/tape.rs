use std::cell::{Cell, RefCell};

use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    Relu { a: Var },
    RowSoftmax { a: Var },
    Log { a: Var },
    Exp { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanRows { a: Var },
    ConcatCols { parts: Vec<Var> },
    Dot { a: Var, b: Var },
    Cosine { a: Var, b: Var },
    Mse { a: Var, b: Var },
    BceWithLogits { logits: Var, targets: Tensor, observed: Vec<bool>, count: usize },
    LogSumExp { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterAddRows { a: Var, idx: Vec<usize> },
    SliceRows { a: Var, start: usize },
    ScaleRows { a: Var, factors: Vec<f64> },
    NormalizeRows { a: Var, norms: Vec<f64> },
    NormalizeCols { a: Var, sums: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } | Dot { a, b } => {
                vec![*a, *b]
            }
            Cosine { a, b } | Mse { a, b } => vec![*a, *b],
            AddRow { a, row } => vec![*a, *row],
            ConcatCols { parts } => parts.clone(),
            BceWithLogits { logits, .. } => vec![*logits],
            Scale { a, .. }
            | Relu { a }
            | RowSoftmax { a }
            | Log { a }
            | Exp { a }
            | Sum { a }
            | Mean { a }
            | MeanRows { a }
            | LogSumExp { a }
            | GatherRows { a, .. }
            | ScatterAddRows { a, .. }
            | SliceRows { a, .. }
            | ScaleRows { a, .. }
            | NormalizeRows { a, .. }
            | NormalizeCols { a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one reverse pass.
///
/// The tape is single-threaded (`!Sync`) and is consumed by [`Tape::backward`].
/// It also carries the similarity work counters of the matching head, so the
/// number of similarity entries alive at once is exactly what this tape holds.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    sim_ops: Cell<u64>,
    held_sim_entries: Cell<u64>,
}

/// Gradients of a scalar with respect to every tracked leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked input whose gradient will be reported by `backward`.
    pub fn var(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Counts `rows * cols` node-pair similarity evaluations.
    pub fn record_similarity_ops(&self, rows: usize, cols: usize) {
        self.sim_ops.set(self.sim_ops.get() + (rows * cols) as u64);
    }

    /// Registers similarity entries that stay alive until the tape is dropped.
    pub fn hold_similarity_entries(&self, entries: usize) {
        self.held_sim_entries
            .set(self.held_sim_entries.get() + entries as u64);
    }

    pub fn sim_ops(&self) -> u64 {
        self.sim_ops.get()
    }

    pub fn held_similarity_entries(&self) -> u64 {
        self.held_sim_entries.get()
    }

    /// Sign of every relu input recorded so far, in tape order. Two points
    /// with the same pattern lie on the same smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(nodes[a.0].value.data().iter().map(|&x| x > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa)
    }

    fn matmul_flags(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = self.with2(a, b, |x, y| {
            let (m, k) = if ta { (x.cols(), x.rows()) } else { x.shape() };
            let (k2, n) = if tb { (y.cols(), y.rows()) } else { y.shape() };
            if k != k2 {
                return Err(Error::shape("matmul", (m, k), (k2, n)));
            }
            let mut out = Tensor::zeros(m, n);
            gemm(x, ta, y, tb, &mut out, 0.0);
            Ok(out)
        })?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    /// `a * b`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, b, false, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, b, false, true)
    }

    /// `a^T * b`
    pub fn matmul_tn(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, b, true, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.with2(a, b, |x, y| {
            let mut o = x.clone();
            o.add_assign(y).map(|_| o)
        })?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::shape("add_row", sa, sr));
        }
        let out = self.with2(a, row, |x, r| {
            let mut o = x.clone();
            for i in 0..o.rows() {
                for (v, b) in o.row_slice_mut(i).iter_mut().zip(r.data()) {
                    *v += b;
                }
            }
            o
        });
        Ok(self.push(out, Op::AddRow { a, row }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.with2(a, b, |x, y| {
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
            Tensor::new(r, c, data)
        })?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.with2(a, b, |x, y| {
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            Tensor::new(r, c, data)
        })?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.with1(a, |x| x.map(|v| v * k));
        self.push(out, Op::Scale { a, k })
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.with1(a, |x| x.map(relu));
        self.push(out, Op::Relu { a })
    }

    /// Softmax along each row, with the row maximum subtracted first.
    pub fn row_softmax(&self, a: Var) -> Var {
        let out = self.with1(a, softmax_rows);
        self.push(out, Op::RowSoftmax { a })
    }

    pub fn log(&self, a: Var) -> Var {
        let out = self.with1(a, |x| x.map(f64::ln));
        self.push(out, Op::Log { a })
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.with1(a, |x| x.map(f64::exp));
        self.push(out, Op::Exp { a })
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.with1(a, |x| Tensor::scalar(x.data().iter().sum()));
        self.push(out, Op::Sum { a })
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |x| {
            if x.is_empty() {
                return Err(Error::Contract("mean of an empty tensor".into()));
            }
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        })?;
        Ok(self.push(out, Op::Mean { a }))
    }

    /// Column-wise mean, producing a single row.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |x| {
            if x.rows() == 0 {
                return Err(Error::Contract("mean over zero rows".into()));
            }
            let mut o = Tensor::zeros(1, x.cols());
            for r in 0..x.rows() {
                for (acc, v) in o.data_mut().iter_mut().zip(x.row_slice(r)) {
                    *acc += v;
                }
            }
            o.scale_in_place(1.0 / x.rows() as f64);
            Ok(o)
        })?;
        Ok(self.push(out, Op::MeanRows { a }))
    }

    /// Concatenation along the column axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut cols = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.0 != rows {
                    return Err(Error::shape("concat_cols", nodes[parts[0].0].value.shape(), s));
                }
                cols += s.1;
            }
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut offset = 0;
                for p in parts {
                    let src = nodes[p.0].value.row_slice(r);
                    out.row_slice_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                    offset += src.len();
                }
            }
            out
        };
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Sum of elementwise products of two equally shaped tensors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let out = self.with2(a, b, |x, y| Tensor::scalar(dot_slices(x.data(), y.data())));
        Ok(self.push(out, Op::Dot { a, b }))
    }

    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let out = self.with2(a, b, |x, y| {
            let (na, nb) = (x.norm(), y.norm());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Contract("cosine similarity of a zero vector".into()));
            }
            Ok(Tensor::scalar(dot_slices(x.data(), y.data()) / (na * nb)))
        })?;
        Ok(self.push(out, Op::Cosine { a, b }))
    }

    /// Mean squared difference.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let out = self.with2(a, b, |x, y| {
            let s: f64 = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            Tensor::scalar(s / x.len().max(1) as f64)
        });
        Ok(self.push(out, Op::Mse { a, b }))
    }

    /// Binary cross-entropy on logits, averaged over observed entries.
    ///
    /// Uses `max(x, 0) - x*y + ln(1 + e^{-|x|})` per entry.
    pub fn bce_with_logits(
        &self,
        logits: Var,
        targets: &Tensor,
        observed: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape != targets.shape() {
            return Err(Error::shape("bce_with_logits", shape, targets.shape()));
        }
        let observed = match observed {
            Some(m) if m.len() != targets.len() => {
                return Err(Error::shape("bce_with_logits mask", shape, (1, m.len())))
            }
            Some(m) => m.to_vec(),
            None => vec![true; targets.len()],
        };
        let count = observed.iter().filter(|&&o| o).count();
        if count == 0 {
            return Err(Error::Contract("bce_with_logits with no observed entries".into()));
        }
        let out = self.with1(logits, |x| {
            let mut s = 0.0;
            for ((&z, &y), &o) in x.data().iter().zip(targets.data()).zip(&observed) {
                if o {
                    s += relu(z) - z * y + (-z.abs()).exp().ln_1p();
                }
            }
            Tensor::scalar(s / count as f64)
        });
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
                observed,
                count,
            },
        ))
    }

    /// `ln(sum(exp(a)))` over all entries, with the maximum subtracted first.
    pub fn log_sum_exp(&self, a: Var) -> Result<Var> {
        let out = self.with1(a, |x| {
            if x.is_empty() {
                return Err(Error::Contract("log_sum_exp of an empty tensor".into()));
            }
            let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = x.data().iter().map(|v| (v - max).exp()).sum();
            Ok(Tensor::scalar(max + s.ln()))
        })?;
        Ok(self.push(out, Op::LogSumExp { a }))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.with1(a, |x| {
            if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: bad,
                    len: x.rows(),
                });
            }
            Ok(x.select_rows(idx))
        })?;
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row `idx[i]` of the `out_rows`-row output accumulates row `i` of `a`.
    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let out = self.with1(a, |x| {
            if idx.len() != x.rows() {
                return Err(Error::shape("scatter_add_rows", x.shape(), (idx.len(), x.cols())));
            }
            let mut o = Tensor::zeros(out_rows, x.cols());
            for (i, &t) in idx.iter().enumerate() {
                if t >= out_rows {
                    return Err(Error::Index {
                        what: "scatter_add_rows",
                        index: t,
                        len: out_rows,
                    });
                }
                for (acc, v) in o.row_slice_mut(t).iter_mut().zip(x.row_slice(i)) {
                    *acc += v;
                }
            }
            Ok(o)
        })?;
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with1(a, |x| {
            if start + len > x.rows() {
                return Err(Error::Index {
                    what: "slice_rows",
                    index: start + len,
                    len: x.rows(),
                });
            }
            let c = x.cols();
            Tensor::new(len, c, x.data()[start * c..(start + len) * c].to_vec())
        })?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&self, a: Var, factors: &[f64]) -> Result<Var> {
        let out = self.with1(a, |x| {
            if factors.len() != x.rows() {
                return Err(Error::shape("scale_rows", x.shape(), (factors.len(), 1)));
            }
            let mut o = x.clone();
            for (r, f) in factors.iter().enumerate() {
                o.row_slice_mut(r).iter_mut().for_each(|v| *v *= f);
            }
            Ok(o)
        })?;
        Ok(self.push(
            out,
            Op::ScaleRows {
                a,
                factors: factors.to_vec(),
            },
        ))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let (out, norms) = self.with1(a, |x| {
            let mut o = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let n = dot_slices(x.row_slice(r), x.row_slice(r)).sqrt();
                if n == 0.0 {
                    return Err(Error::Contract(format!("row {r} has zero norm")));
                }
                o.row_slice_mut(r).iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            Ok((o, norms))
        })?;
        Ok(self.push(out, Op::NormalizeRows { a, norms }))
    }

    /// Divides every column by its sum.
    pub fn normalize_cols(&self, a: Var) -> Result<Var> {
        let (out, sums) = self.with1(a, |x| {
            let mut sums = vec![0.0; x.cols()];
            for r in 0..x.rows() {
                for (s, v) in sums.iter_mut().zip(x.row_slice(r)) {
                    *s += v;
                }
            }
            if let Some(c) = sums.iter().position(|&s| s == 0.0) {
                return Err(Error::Contract(format!("column {c} sums to zero")));
            }
            let mut o = x.clone();
            for r in 0..o.rows() {
                for (v, s) in o.row_slice_mut(r).iter_mut().zip(&sums) {
                    *v /= s;
                }
            }
            Ok((o, sums))
        })?;
        Ok(self.push(out, Op::NormalizeCols { a, sums }))
    }

    /// Reverse pass from a `1 x 1` loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        let shape = nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta).expect("gradient shapes agree"),
        slot @ None => *slot = Some(delta),
    }
}

/// Like `accumulate`, but hands the caller a zeroed-or-existing buffer to add into.
fn grad_buffer<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Tensor>],
    v: Var,
) -> Option<&'g mut Tensor> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let (r, c) = nodes[v.0].value.shape();
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (x, y) = (val(*a), val(*b));
            if let Some(ga) = grad_buffer(nodes, grads, *a) {
                if *ta {
                    gemm(y, *tb, g, true, ga, 1.0);
                } else {
                    gemm(g, false, y, !*tb, ga, 1.0);
                }
            }
            if let Some(gb) = grad_buffer(nodes, grads, *b) {
                if *tb {
                    gemm(g, true, x, *ta, gb, 1.0);
                } else {
                    gemm(x, !*ta, g, false, gb, 1.0);
                }
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::AddRow { a, row } => {
            accumulate(nodes, grads, *a, g.clone());
            if let Some(gr) = grad_buffer(nodes, grads, *row) {
                for r in 0..g.rows() {
                    for (acc, v) in gr.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *acc += v;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul { a, b } => {
            let (x, y) = (val(*a), val(*b));
            let ga = zip_map(g, y, |p, q| p * q);
            let gb = zip_map(g, x, |p, q| p * q);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Scale { a, k } => accumulate(nodes, grads, *a, g.map(|v| v * k)),
        Op::Relu { a } => {
            let ga = zip_map(g, val(*a), |p, x| if x > 0.0 { p } else { 0.0 });
            accumulate(nodes, grads, *a, ga);
        }
        Op::RowSoftmax { a } => {
            let y = &node.value;
            let mut ga = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                let inner = dot_slices(yr, gr);
                for ((o, yv), gv) in ga.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - inner);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Log { a } => accumulate(nodes, grads, *a, zip_map(g, val(*a), |p, x| p / x)),
        Op::Exp { a } => accumulate(nodes, grads, *a, zip_map(g, &node.value, |p, y| p * y)),
        Op::Sum { a } => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor::filled(r, c, g.item()));
        }
        Op::Mean { a } => {
            let x = val(*a);
            let k = g.item() / x.len() as f64;
            accumulate(nodes, grads, *a, Tensor::filled(x.rows(), x.cols(), k));
        }
        Op::MeanRows { a } => {
            let x = val(*a);
            if let Some(ga) = grad_buffer(nodes, grads, *a) {
                let inv = 1.0 / x.rows() as f64;
                for r in 0..x.rows() {
                    for (acc, v) in ga.row_slice_mut(r).iter_mut().zip(g.data()) {
                        *acc += v * inv;
                    }
                }
            }
        }
        Op::ConcatCols { parts } => {
            let mut offset = 0;
            for p in parts {
                let (rows, cols) = val(*p).shape();
                if let Some(gp) = grad_buffer(nodes, grads, *p) {
                    for r in 0..rows {
                        let src = &g.row_slice(r)[offset..offset + cols];
                        for (acc, v) in gp.row_slice_mut(r).iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                offset += cols;
            }
        }
        Op::Dot { a, b } => {
            let k = g.item();
            accumulate(nodes, grads, *a, val(*b).map(|v| v * k));
            accumulate(nodes, grads, *b, val(*a).map(|v| v * k));
        }
        Op::Cosine { a, b } => {
            let (x, y) = (val(*a), val(*b));
            let (nx, ny) = (x.norm(), y.norm());
            let c = node.value.item();
            let k = g.item();
            let gx = zip_map(y, x, |yv, xv| k * (yv / (nx * ny) - c * xv / (nx * nx)));
            let gy = zip_map(x, y, |xv, yv| k * (xv / (nx * ny) - c * yv / (ny * ny)));
            accumulate(nodes, grads, *a, gx);
            accumulate(nodes, grads, *b, gy);
        }
        Op::Mse { a, b } => {
            let (x, y) = (val(*a), val(*b));
            let k = 2.0 * g.item() / x.len().max(1) as f64;
            let gx = zip_map(x, y, |p, q| k * (p - q));
            accumulate(nodes, grads, *b, gx.map(|v| -v));
            accumulate(nodes, grads, *a, gx);
        }
        Op::BceWithLogits {
            logits,
            targets,
            observed,
            count,
        } => {
            let x = val(*logits);
            let k = g.item() / *count as f64;
            let mut gx = Tensor::zeros(x.rows(), x.cols());
            for (i, o) in gx.data_mut().iter_mut().enumerate() {
                if observed[i] {
                    *o = k * (sigmoid(x.data()[i]) - targets.data()[i]);
                }
            }
            accumulate(nodes, grads, *logits, gx);
        }
        Op::LogSumExp { a } => {
            let x = val(*a);
            let lse = node.value.item();
            let k = g.item();
            accumulate(nodes, grads, *a, x.map(|v| k * (v - lse).exp()));
        }
        Op::GatherRows { a, idx } => {
            if let Some(ga) = grad_buffer(nodes, grads, *a) {
                for (i, &src) in idx.iter().enumerate() {
                    for (acc, v) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(i)) {
                        *acc += v;
                    }
                }
            }
        }
        Op::ScatterAddRows { a, idx } => {
            accumulate(nodes, grads, *a, g.select_rows(idx));
        }
        Op::SliceRows { a, start } => {
            if let Some(ga) = grad_buffer(nodes, grads, *a) {
                let c = g.cols();
                let dst = &mut ga.data_mut()[start * c..start * c + g.len()];
                for (acc, v) in dst.iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
        Op::ScaleRows { a, factors } => {
            let mut ga = g.clone();
            for (r, f) in factors.iter().enumerate() {
                ga.row_slice_mut(r).iter_mut().for_each(|v| *v *= f);
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::NormalizeRows { a, norms } => {
            let y = &node.value;
            let mut ga = Tensor::zeros(y.rows(), y.cols());
            for (r, n) in norms.iter().enumerate() {
                let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                let inner = dot_slices(yr, gr);
                for ((o, yv), gv) in ga.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = (gv - yv * inner) / n;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::NormalizeCols { a, sums } => {
            let y = &node.value;
            let mut inner = vec![0.0; y.cols()];
            for r in 0..y.rows() {
                for ((acc, yv), gv) in inner.iter_mut().zip(y.row_slice(r)).zip(g.row_slice(r)) {
                    *acc += yv * gv;
                }
            }
            let mut ga = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                for (c, (o, gv)) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(r)).enumerate() {
                    *o = (gv - inner[c]) / sums[c];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("zip_map shapes agree")
}
