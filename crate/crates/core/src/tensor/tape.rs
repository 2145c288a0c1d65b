//! Reverse-mode tape over tensor-level primitives.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates gradients for nodes that
//! (transitively) depend on a leaf created with `requires_grad`.
//! All values are rank-2; a scalar is `1×1`.

use std::sync::Arc;

use super::linalg::{matmul, matmul_nt, matmul_tn};
use super::svd::second_singular_value;
use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Neighbor index lists shared between graph nodes (one list per row).
pub type NeighborLists = Arc<Vec<Vec<u32>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    NeighborMax { x: Var, argmax: Vec<u32> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    SliceRows { x: Var, start: usize },
    MeanRows { x: Var, rows: Vec<usize> },
    StraightThroughMean { w: Var, x: Var, rows: Vec<usize> },
    SoftmaxRows(Var),
    Nll { p: Var, targets: Vec<usize> },
    SelectCol { x: Var, col: usize },
    WeightedMaxPool { w: Var, f: Var, argmax: Vec<u32> },
    L2Normalize { x: Var, norm: f64 },
    Sigma2 { x: Var, grad: Tensor },
    RowMax { x: Var, argmax: Vec<u32> },
    Sum(Var),
    Mean(Var),
    Pick { inputs: Vec<Var>, chosen: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf copying `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_owned(t.clone())
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        let mut value = t;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_owned(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x (n×d) + b (1×d)` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = dims(self.value(x));
        if self.value(b).len() != d {
            return Err(Error::shape("add_bias", format!("{n}x{d} + {:?}", self.value(b).shape())));
        }
        let bias = self.value(b).values().to_vec();
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::AddBias(x, b), &[x, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let out = self.value(x).values().iter().map(|v| f(*v)).collect();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `out[q, c] = max over j in neighbors[q] of x[j, c]`.
    pub fn neighbor_max(&mut self, x: Var, neighbors: &NeighborLists) -> Result<Var> {
        let (n, d) = dims(self.value(x));
        if neighbors.len() != n {
            return Err(Error::shape("neighbor_max", format!("{} lists for {n} rows", neighbors.len())));
        }
        if neighbors.iter().any(|l| l.is_empty() || l.iter().any(|&j| j as usize >= n)) {
            return Err(Error::shape("neighbor_max", "empty or out-of-range neighbor list"));
        }
        let xv = self.value(x).values();
        let mut out = vec![f64::NEG_INFINITY; n * d];
        let mut argmax = vec![0u32; n * d];
        par::for_each_row_pair(&mut out, d, &mut argmax, d, |q, best, arg| {
            for &j in neighbors[q].iter() {
                let row = &xv[j as usize * d..(j as usize + 1) * d];
                for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(row) {
                    let gt = v > *b;
                    *b = if gt { v } else { *b };
                    *a = if gt { j } else { *a };
                }
            }
        });
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::NeighborMax { x, argmax }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != d) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).values());
        }
        let n = out.len() / d.max(1);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Broadcast a `1×d` row to `n×d`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        if self.value(x).rows() != 1 {
            return Err(Error::shape("repeat_rows", "expected a single row"));
        }
        let row = self.value(x).values().to_vec();
        let d = row.len();
        let out = row.repeat(n);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::RepeatRows(x), &[x]))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = dims(self.value(x));
        if start >= end || end > n {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {n}")));
        }
        let out = self.value(x).values()[start * d..end * d].to_vec();
        Ok(self.push(Tensor::from_parts(vec![end - start, d], out), Op::SliceRows { x, start }, &[x]))
    }

    /// Mean of the selected rows, as `1×d`.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = dims(self.value(x));
        if rows.is_empty() {
            return Err(Error::EmptyForeground);
        }
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("mean_rows", "row index out of range"));
        }
        let xv = self.value(x).values();
        let mut out = vec![0.0; d];
        for &r in rows {
            out.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(
            Tensor::from_parts(vec![1, d], out),
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean of `x` over `rows` in the forward pass. The backward pass treats
    /// the output as `Σ w_q x_q / Σ w_q` evaluated at the hard 0/1 mask, so
    /// the soft weights `w` (`n×1`) receive `(x_q − mean)·g / |rows|`.
    pub fn straight_through_mean(&mut self, w: Var, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(x).rows();
        if self.value(w).len() != n {
            return Err(Error::shape("straight_through_mean", "weights must have one entry per row"));
        }
        let mean = self.mean_rows(x, rows)?;
        let value = self.value(mean).clone();
        Ok(self.push(
            value,
            Op::StraightThroughMean {
                w,
                x: mean,
                rows: rows.to_vec(),
            },
            &[w, mean],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let (n, d) = dims(t);
        let mut out = t.values().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::SoftmaxRows(x), &[x]))
    }

    /// Mean over rows of `-ln(max(p[row, target], 1e-12))`.
    pub fn nll(&mut self, p: Var, targets: &[usize]) -> Result<Var> {
        let (n, d) = dims(self.value(p));
        if targets.len() != n {
            return Err(Error::shape("nll", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= d) {
            return Err(Error::Invalid(format!("target {t} out of range for {d} classes")));
        }
        let pv = self.value(p).values();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -pv[r * d + t].max(NLL_FLOOR).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                p,
                targets: targets.to_vec(),
            },
            &[p],
        ))
    }

    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var> {
        let (n, d) = dims(self.value(x));
        if col >= d {
            return Err(Error::shape("select_col", format!("column {col} of {d}")));
        }
        let out = (0..n).map(|r| self.value(x).values()[r * d + col]).collect();
        Ok(self.push(Tensor::from_parts(vec![n, 1], out), Op::SelectCol { x, col }, &[x]))
    }

    /// `out[c] = max over q of w[q] · f[q, c]`, as `1×d`.
    pub fn weighted_max_pool(&mut self, w: Var, f: Var) -> Result<Var> {
        let (n, d) = dims(self.value(f));
        if self.value(w).len() != n || n == 0 {
            return Err(Error::shape("weighted_max_pool", "weights must have one entry per row"));
        }
        let wv = self.value(w).values();
        let fv = self.value(f).values();
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0u32; d];
        for q in 0..n {
            let row = &fv[q * d..(q + 1) * d];
            for c in 0..d {
                let v = wv[q] * row[c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = q as u32;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![1, d], out),
            Op::WeightedMaxPool { w, f, argmax },
            &[w, f],
        ))
    }

    /// Scale a row vector to unit L2 norm (norm floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let norm = self.value(x).frobenius_norm().max(1e-12);
        let shape = self.value(x).shape().to_vec();
        let out = self.value(x).values().iter().map(|v| v / norm).collect();
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norm }, &[x])
    }

    /// Second singular value of a matrix, as a scalar.
    pub fn sigma2(&mut self, x: Var) -> Result<Var> {
        let (v, grad) = second_singular_value(self.value(x))?;
        Ok(self.push(Tensor::scalar(v), Op::Sigma2 { x, grad }, &[x]))
    }

    /// Per-row maximum, as `n×1`.
    pub fn row_max(&mut self, x: Var) -> Var {
        let (n, d) = dims(self.value(x));
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for row in xv.chunks(d) {
            let (i, v) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            out.push(v);
            argmax.push(i as u32);
        }
        self.push(Tensor::from_parts(vec![n, 1], out), Op::RowMax { x, argmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.values().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn pick(&mut self, inputs: &[Var], better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Invalid("max/min of no values".into()));
        }
        let mut chosen = 0;
        for (i, v) in inputs.iter().enumerate() {
            if self.value(*v).len() != 1 {
                return Err(Error::shape("max/min", "inputs must be scalars"));
            }
            if better(self.value(*v).item(), self.value(inputs[chosen]).item()) {
                chosen = i;
            }
        }
        let value = self.value(inputs[chosen]).clone();
        Ok(self.push(
            Tensor::from_parts(vec![1, 1], value.into_values()),
            Op::Pick {
                inputs: inputs.to_vec(),
                chosen,
            },
            inputs,
        ))
    }

    /// Maximum of scalars; the gradient flows to the first achiever.
    pub fn max_of(&mut self, inputs: &[Var]) -> Result<Var> {
        self.pick(inputs, |a, b| a > b)
    }

    /// Minimum of scalars; the gradient flows to the first achiever.
    pub fn min_of(&mut self, inputs: &[Var]) -> Result<Var> {
        self.pick(inputs, |a, b| a < b)
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Backpropagate from arbitrary seed gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Grads> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::shape("backward", "seed gradient size"));
            }
            accumulate(&mut grads[v.0], g);
            top = top.max(v.0 + 1);
        }
        for idx in (0..top).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = out.cols();
                if want(*a) {
                    let ga = matmul_nt(g, self.value(*b).values(), m, n, k);
                    accumulate(&mut grads[a.0], &ga);
                }
                if want(*b) {
                    let gb = matmul_tn(self.value(*a).values(), g, m, k, n);
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if want(*b) {
                    let d = out.cols();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if want(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b).values()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                if want(*b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(*a).values()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| c * v).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::AddScalar(x) => accumulate(&mut grads[x.0], g),
            Op::Relu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out.values())
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::NeighborMax { x, argmax } => {
                let d = out.cols();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.value(*x).len()]);
                for (i, (gv, &j)) in g.iter().zip(argmax).enumerate() {
                    slot[j as usize * d + i % d] += gv;
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if want(*p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], &gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if want(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::RepeatRows(x) => {
                let d = out.cols();
                let mut gx = vec![0.0; d];
                for row in g.chunks(d) {
                    gx.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::SliceRows { x, start } => {
                let d = out.cols();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.value(*x).len()]);
                slot[start * d..start * d + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, v)| *s += v);
            }
            Op::MeanRows { x, rows } => {
                let d = out.cols();
                let inv = 1.0 / rows.len() as f64;
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.value(*x).len()]);
                for &r in rows {
                    slot[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, v)| *s += v * inv);
                }
            }
            Op::StraightThroughMean { w, x: mean, rows } => {
                if want(*mean) {
                    accumulate(&mut grads[mean.0], g);
                }
                if want(*w) {
                    let Op::MeanRows { x, .. } = &self.nodes[mean.0].op else {
                        unreachable!("straight_through_mean wraps mean_rows")
                    };
                    let (n, d) = dims(self.value(*x));
                    let xv = self.value(*x).values();
                    let m = out.values();
                    let inv = 1.0 / rows.len() as f64;
                    let gw: Vec<f64> = (0..n)
                        .map(|q| {
                            xv[q * d..(q + 1) * d]
                                .iter()
                                .zip(m)
                                .zip(g)
                                .map(|((a, b), gv)| (a - b) * gv)
                                .sum::<f64>()
                                * inv
                        })
                        .collect();
                    accumulate(&mut grads[w.0], &gw);
                }
            }
            Op::SoftmaxRows(x) => {
                let d = out.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out_r) in g.chunks(d).zip(out.values().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dotv: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        out_r[c] = yr[c] * (gr[c] - dotv);
                    }
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Nll { p, targets } => {
                let (n, d) = dims(self.value(*p));
                let pv = self.value(*p).values();
                let slot = grads[p.0].get_or_insert_with(|| vec![0.0; n * d]);
                for (r, &t) in targets.iter().enumerate() {
                    let v = pv[r * d + t];
                    if v > NLL_FLOOR {
                        slot[r * d + t] -= g[0] / (v * n as f64);
                    }
                }
            }
            Op::SelectCol { x, col } => {
                let d = self.value(*x).cols();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.value(*x).len()]);
                for (r, gv) in g.iter().enumerate() {
                    slot[r * d + col] += gv;
                }
            }
            Op::WeightedMaxPool { w, f, argmax } => {
                let d = out.cols();
                let wv = self.value(*w).values();
                let fv = self.value(*f).values();
                if want(*w) {
                    let slot = grads[w.0].get_or_insert_with(|| vec![0.0; wv.len()]);
                    for c in 0..d {
                        let q = argmax[c] as usize;
                        slot[q] += g[c] * fv[q * d + c];
                    }
                }
                if want(*f) {
                    let slot = grads[f.0].get_or_insert_with(|| vec![0.0; fv.len()]);
                    for c in 0..d {
                        let q = argmax[c] as usize;
                        slot[q * d + c] += g[c] * wv[q];
                    }
                }
            }
            Op::L2Normalize { x, norm } => {
                let y = out.values();
                let dotv: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let gx: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| (gv - yv * dotv) / norm).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Sigma2 { x, grad } => {
                let gx: Vec<f64> = grad.values().iter().map(|v| v * g[0]).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::RowMax { x, argmax } => {
                let d = self.value(*x).cols();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.value(*x).len()]);
                for (r, (gv, &c)) in g.iter().zip(argmax).enumerate() {
                    slot[r * d + c as usize] += gv;
                }
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gx = vec![g[0] / n as f64; n];
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Pick { inputs, chosen } => {
                let v = inputs[*chosen];
                if want(v) {
                    accumulate(&mut grads[v.0], g);
                }
            }
        }
    }
}

const NLL_FLOOR: f64 = 1e-12;

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Standalone row softmax of a rank-2 tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.softmax_rows(v)?;
    Ok(tape.value(y).clone())
}

/// Standalone mean negative log-likelihood.
pub fn nll_loss(probabilities: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(probabilities);
    let y = tape.nll(v, targets)?;
    Ok(tape.value(y).item())
}
