//! Per-forward-pass recording graph for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. A graph is
//! built for one forward pass, differentiated once, then dropped.

use std::collections::BTreeMap;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to the second argument of [`Graph::kl_div`].
pub const KL_EPS: f64 = 1e-12;
/// Below this norm a vector is treated as zero by [`Graph::cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowBias(NodeId, NodeId),
    AddColBias(NodeId, NodeId),
    Transpose(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    KlRows(NodeId, NodeId),
    Cosine(NodeId, NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    RowNormalize(NodeId),
    ScaleRows(NodeId, NodeId),
    MinConst(NodeId, f64),
    /// Value computed outside the graph as a function of one scalar node;
    /// `jac` holds d(value)/d(scalar) elementwise.
    Linearized { scalar: NodeId, jac: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording graph. Confined to one thread; build a fresh one per pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<usize, String>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if one reached it.
    pub fn of(&self, id: NodeId) -> Option<&[f64]> {
        self.per_node.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradients of named parameter leaves, keyed by parameter name.
    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that does not receive gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Unnamed leaf that receives gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Named leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.names.insert(id.0, name.to_string());
        id
    }

    /// Copy of `id`'s value as a constant: gradient stops here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_matrix(self.value(a), "matmul lhs")?;
        let (k2, n) = require_matrix(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_matrix(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = require_matrix(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt inner dimensions differ: {m}x{k} by ({n}x{k2})^T"
            )));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg))
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        check_same(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let t = self.map(a, |x| x * k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// `x[r, c] + bias[c]`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "add_row_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::dim(format!(
                "row bias of length {} for {m}x{n} input",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRowBias(x, bias), rg))
    }

    /// `x[r, c] + bias[r]`.
    pub fn add_col_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "add_col_bias")?;
        if self.value(bias).len() != m {
            return Err(Error::dim(format!(
                "column bias of length {} for {m}x{n} input",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (row, bv) in out.chunks_mut(n).zip(&b) {
            for o in row.iter_mut() {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddColBias(x, bias), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let n = v.cols();
        if n == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let t = Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm affine length differs from width"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, softplus);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softplus(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same(self.value(a), self.value(b), "mse")?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let n = va.len().max(1) as f64;
        let s = va.iter().zip(vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Mean over rows of `Σ p ln(max(p, KL_EPS) / max(q, KL_EPS))`, with
    /// `0 ln 0 = 0`. Clamping both sides keeps `kl(p, p)` exactly zero.
    ///
    /// Both inputs must be row-stochastic; negative entries are a domain error.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        check_same(self.value(p), self.value(q), "kl_div")?;
        let vp = self.value(p);
        let vq = self.value(q);
        let n = vp.cols();
        for (name, t) in [("p", vp), ("q", vq)] {
            if t.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::Domain(format!(
                    "kl_div: {name} has negative or non-finite entries"
                )));
            }
            for (r, row) in t.data().chunks(n).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Domain(format!(
                        "kl_div: row {r} of {name} sums to {s}"
                    )));
                }
            }
        }
        let rows = vp.rows().max(1) as f64;
        let mut total = 0.0;
        for (&pi, &qi) in vp.data().iter().zip(vq.data()) {
            if pi > 0.0 {
                total += pi * (pi.max(KL_EPS) / qi.max(KL_EPS)).ln();
            }
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::scalar(total / rows), Op::KlRows(p, q), rg))
    }

    /// `u·v / (|u| |v|)` over flattened inputs; 0 when either norm is below
    /// [`COSINE_EPS`].
    pub fn cosine_similarity(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        if self.value(u).len() != self.value(v).len() {
            return Err(Error::dim(format!(
                "cosine_similarity: lengths {} and {} differ",
                self.value(u).len(),
                self.value(v).len()
            )));
        }
        let (dot, nu, nv) = cos_parts(self.value(u).data(), self.value(v).data());
        let c = if nu < COSINE_EPS || nv < COSINE_EPS {
            0.0
        } else {
            dot / (nu * nv)
        };
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a).slice_rows(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(a), "slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim(format!(
                "column slice {start}..{end} out of range for {n} columns"
            )));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows of nothing"));
        }
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, c) = require_matrix(v, "concat_rows")?;
            if c != n {
                return Err(Error::dim(format!(
                    "concat_rows: widths {n} and {c} differ"
                )));
            }
            out.extend_from_slice(v.data());
            m += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols of nothing"));
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_matrix(self.value(p), "concat_cols")?;
            if r != m {
                return Err(Error::dim(format!(
                    "concat_cols: heights {m} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Divide each row by its sum. Rows must have a positive sum.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let n = v.cols();
        let mut out = v.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let s: f64 = row.iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::Domain(format!(
                    "row_normalize: row {r} sums to {s}"
                )));
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::RowNormalize(a), rg))
    }

    /// `x[r, c] * w[r]`.
    pub fn scale_rows(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (m, n) = require_matrix(self.value(x), "scale_rows")?;
        if self.value(w).len() != m {
            return Err(Error::dim(format!(
                "scale_rows: {} weights for {m} rows",
                self.value(w).len()
            )));
        }
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (row, k) in out.chunks_mut(n).zip(&wv) {
            for o in row.iter_mut() {
                *o *= k;
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ScaleRows(x, w), rg))
    }

    /// Elementwise `min(a, cap)`; gradient is zero where the cap is active.
    pub fn min_const(&mut self, a: NodeId, cap: f64) -> NodeId {
        let t = self.map(a, |x| x.min(cap));
        let rg = self.rg(&[a]);
        self.push(t, Op::MinConst(a, cap), rg)
    }

    /// Records a value computed outside the graph as a smooth function of the
    /// scalar node `scalar`, with elementwise derivative `jac`.
    pub fn linearized(&mut self, value: Tensor, scalar: NodeId, jac: Vec<f64>) -> Result<NodeId> {
        if self.value(scalar).len() != 1 {
            return Err(Error::dim("linearized: driver must be a scalar"));
        }
        if jac.len() != value.len() {
            return Err(Error::dim("linearized: jacobian length differs from value"));
        }
        let rg = self.rg(&[scalar]);
        Ok(self.push(value, Op::Linearized { scalar, jac }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
        for (&idx, name) in &self.names {
            if let Some(g) = &grads[idx] {
                let t = Tensor::new(self.nodes[idx].value.shape().to_vec(), g.clone())?;
                match named.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        named.insert(name.clone(), t);
                    }
                }
            }
        }
        Ok(Gradients {
            per_node: grads,
            named,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.cols();
                if wants(*a) {
                    acc(*a, matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a bᵀ; da = g b; db = gᵀ a
                let sa = self.nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.cols();
                if wants(*a) {
                    acc(*a, matmul_raw(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, matmul_tn(g, val(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
            Op::AddRowBias(x, bias) => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let n = node.value.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::AddColBias(x, bias) => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let n = node.value.cols();
                    acc(*bias, g.chunks(n).map(|row| row.iter().sum()).collect());
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                // node is m×n, parent is n×m
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = g[i * n + j];
                    }
                }
                acc(*a, out);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(*a, out);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gm = val(*gamma);
                if wants(*gamma) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    acc(*gamma, gg);
                }
                if wants(*beta) {
                    let mut gb = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            gb[c] += gr[c];
                        }
                    }
                    acc(*beta, gb);
                }
                if wants(*x) {
                    let mut out = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, ((gr, hr), or)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(out.chunks_mut(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            or[c] = rstd[r] / nf * (nf * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                    acc(*x, out);
                }
            }
            Op::Gelu(a) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(gi, &x)| gi * gelu_grad(x)).collect(),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect(),
            ),
            Op::Softplus(a) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(gi, &x)| gi * sigmoid(x)).collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[a.0].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len().max(1);
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Mse(a, b) => {
                let va = val(*a);
                let vb = val(*b);
                let k = 2.0 * g[0] / va.len().max(1) as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| k * (x - y)).collect();
                if wants(*b) {
                    acc(*b, d.iter().map(|x| -x).collect());
                }
                acc(*a, d);
            }
            Op::KlRows(p, q) => {
                let vp = val(*p);
                let vq = val(*q);
                let rows = self.nodes[p.0].value.rows().max(1) as f64;
                let k = g[0] / rows;
                if wants(*p) {
                    acc(
                        *p,
                        vp.iter()
                            .zip(vq)
                            .map(|(&pi, &qi)| {
                                if pi > KL_EPS {
                                    k * ((pi / qi.max(KL_EPS)).ln() + 1.0)
                                } else if pi > 0.0 {
                                    k * (KL_EPS / qi.max(KL_EPS)).ln()
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                if wants(*q) {
                    acc(
                        *q,
                        vp.iter()
                            .zip(vq)
                            .map(|(&pi, &qi)| if qi > KL_EPS { -k * pi / qi } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::Cosine(u, v) => {
                let vu = val(*u);
                let vv = val(*v);
                let (dot, nu, nv) = cos_parts(vu, vv);
                if nu < COSINE_EPS || nv < COSINE_EPS {
                    return;
                }
                let c = dot / (nu * nv);
                let k = g[0];
                if wants(*u) {
                    acc(
                        *u,
                        vu.iter()
                            .zip(vv)
                            .map(|(a, b)| k * (b / (nu * nv) - c * a / (nu * nu)))
                            .collect(),
                    );
                }
                if wants(*v) {
                    acc(
                        *v,
                        vu.iter()
                            .zip(vv)
                            .map(|(a, b)| k * (a / (nu * nv) - c * b / (nv * nv)))
                            .collect(),
                    );
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.value.cols();
                let mut out = vec![0.0; self.nodes[a.0].value.len()];
                out[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*a, out);
            }
            Op::SliceCols(a, start) => {
                let pn = self.nodes[a.0].value.cols();
                let w = node.value.cols();
                let mut out = vec![0.0; self.nodes[a.0].value.len()];
                for (r, gr) in g.chunks(w).enumerate() {
                    out[r * pn + start..r * pn + start + w].copy_from_slice(gr);
                }
                acc(*a, out);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = self.nodes[p.0].value.len();
                    acc(p, g[off..off + l].to_vec());
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if wants(p) {
                        let mut out = Vec::with_capacity(self.nodes[p.0].value.len());
                        for gr in g.chunks(n) {
                            out.extend_from_slice(&gr[off..off + w]);
                        }
                        acc(p, out);
                    }
                    off += w;
                }
            }
            Op::RowNormalize(a) => {
                // y = x / s; dx_j = (g_j - Σ g_i y_i) / s
                let n = node.value.cols();
                let x = val(*a);
                let y = node.value.data();
                let mut out = vec![0.0; g.len()];
                for (((gr, yr), xr), or) in g
                    .chunks(n)
                    .zip(y.chunks(n))
                    .zip(x.chunks(n))
                    .zip(out.chunks_mut(n))
                {
                    let s: f64 = xr.iter().sum();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, gi) in or.iter_mut().zip(gr) {
                        *o = (gi - dot) / s;
                    }
                }
                acc(*a, out);
            }
            Op::ScaleRows(x, w) => {
                let n = node.value.cols();
                let vx = val(*x);
                let vw = val(*w);
                if wants(*x) {
                    let mut out = g.to_vec();
                    for (row, k) in out.chunks_mut(n).zip(vw) {
                        for o in row.iter_mut() {
                            *o *= k;
                        }
                    }
                    acc(*x, out);
                }
                if wants(*w) {
                    acc(
                        *w,
                        g.chunks(n)
                            .zip(vx.chunks(n))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect(),
                    );
                }
            }
            Op::MinConst(a, cap) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| if x < *cap { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::Linearized { scalar, jac } => {
                let s: f64 = g.iter().zip(jac).map(|(a, b)| a * b).sum();
                acc(*scalar, vec![s]);
            }
        }
    }
}

fn cos_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot, nu, nv)
}
