//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! The tape is rebuilt on every forward pass: callers register leaves,
//! chain operations through `Var` handles, call `backward` on a scalar
//! loss, and harvest per-leaf gradients. Node values live in a flat
//! arena; backward replays the recorded ops once, in reverse order.

use crate::error::{Error, Result};
use rand::Rng;

/// Epsilon guarding cosine denominators against zero norms.
pub const COSINE_EPS: f64 = 1e-12;
/// Epsilon added to the layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-12;

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense row-major f64 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "tensor construction" });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], grad: None, requires_grad: false }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor { shape: vec![v.len()], data: v, grad: None, requires_grad: false }
    }

    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows in matrix constructor".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Gaussian init via Box-Muller, deterministic under a seeded rng.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            data.push(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
        }
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// out += a @ b, shapes [m,k] x [k,n].
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a @ b^T, shapes [m,k] x [n,k].
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a^T @ b, shapes [m,k] x [m,n] -> [k,n].
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_S2P: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_S2P * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_S2P * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S2P * (1.0 + 3.0 * GELU_C * x * x)
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Saved forward values for the cosine backward rule.
#[derive(Clone)]
struct CosSaved {
    identical: bool,
    guarded_na: f64,
    guarded_nb: f64,
    raw: f64,
}

enum Op {
    Matmul { a: Var, b: Var, out: Var },
    MatmulNT { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    Shift { x: Var, out: Var },
    AddRow { x: Var, row: Var, out: Var },
    Softmax { x: Var, axis: usize, out: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, out: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Var, out: Var },
    EmbeddingLookup { table: Var, ids: Vec<usize>, out: Var },
    ConcatRows { parts: Vec<Var>, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    Row { x: Var, index: usize, out: Var },
    SliceRows { x: Var, start: usize, out: Var },
    MeanRows { x: Var, out: Var },
    MeanAll { x: Var, out: Var },
    Abs { x: Var, out: Var },
    Ln { x: Var, out: Var },
    Cosine { a: Var, b: Var, out: Var, saved: CosSaved },
    SumList { parts: Vec<Var>, out: Var },
    StackScalars { parts: Vec<Var>, out: Var },
    Index { x: Var, index: usize, out: Var },
    Reshape { x: Var, out: Var },
}

/// Define-by-run recording tape. One tape per forward pass, confined to
/// one execution context.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// A tape that computes values but records no backward rules.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, requires_grad: requires_grad && self.grad_enabled });
        Var(id)
    }

    fn push_op(&mut self, op: Op, inputs_require: bool) {
        if self.grad_enabled && inputs_require {
            self.ops.push(op);
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_finite(&self, v: Var, op: &'static str) -> Result<Var> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    // ── Leaves ───────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(t.data().to_vec(), t.shape().to_vec(), t.requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_node(t.data().to_vec(), t.shape().to_vec(), false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push_node(vec![x], vec![1], false)
    }

    pub fn leaf_raw(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.push_node(data, shape, requires_grad)
    }

    // ── Accessors ────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Gradient accumulated for `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => (0, 0),
        }
    }

    // ── Operations ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let req = self.rg(a) || self.rg(b);
        let v = self.push_node(out, vec![m, n], req);
        self.push_op(Op::Matmul { a, b, out: v }, req);
        self.check_finite(v, "matmul")
    }

    /// a @ b^T with shapes [m,k] x [n,k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let req = self.rg(a) || self.rg(b);
        let v = self.push_node(out, vec![m, n], req);
        self.push_op(Op::MatmulNT { a, b, out: v }, req);
        self.check_finite(v, "matmul_nt")
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Vec<f64>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let xs = &self.nodes[a.0].data;
        let ys = &self.nodes[b.0].data;
        let out = match op {
            "add" => xs.iter().zip(ys).map(|(x, y)| x + y).collect(),
            "sub" => xs.iter().zip(ys).map(|(x, y)| x - y).collect(),
            _ => xs.iter().zip(ys).map(|(x, y)| x * y).collect(),
        };
        Ok((out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, req) = self.elementwise(a, b, "add")?;
        let shape = self.shape(a).to_vec();
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Add { a, b, out: v }, req);
        self.check_finite(v, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, req) = self.elementwise(a, b, "sub")?;
        let shape = self.shape(a).to_vec();
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Sub { a, b, out: v }, req);
        self.check_finite(v, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, req) = self.elementwise(a, b, "mul")?;
        let shape = self.shape(a).to_vec();
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Mul { a, b, out: v }, req);
        self.check_finite(v, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.rg(x);
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Scale { x, c, out: v }, req);
        self.check_finite(v, "scale")
    }

    /// Elementwise x + c for a constant c.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.rg(x);
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Shift { x, out: v }, req);
        self.check_finite(v, "shift")
    }

    /// Broadcast-add a length-n row vector to every row of [m,n].
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.shape(row) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let rdata = self.nodes[row.0].data.clone();
        let mut out = self.nodes[x.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += rdata[j];
            }
        }
        let req = self.rg(x) || self.rg(row);
        let v = self.push_node(out, vec![m, n], req);
        self.push_op(Op::AddRow { x, row, out: v }, req);
        self.check_finite(v, "add_row")
    }

    /// Numerically stabilized softmax along `axis` of a rank-1/2 tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = &self.nodes[x.0].data;
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * len * inner + a * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(xs[idx(a)]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (xs[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[idx(a)] /= sum;
                }
            }
        }
        let req = self.rg(x);
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Softmax { x, axis, out: v }, req);
        self.check_finite(v, "softmax")
    }

    /// Row-wise layer norm of [m,n] with per-feature affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let xs = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..n {
                out[i * n + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let req = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push_node(out, vec![m, n], req);
        self.push_op(Op::LayerNorm { x, gamma, beta, out: v, mean: means, inv_std: inv_stds }, req);
        self.check_finite(v, "layer_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.rg(x);
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Gelu { x, out: v }, req);
        self.check_finite(v, "gelu")
    }

    /// Gather rows of a [vocab, d] table by token id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims2(table);
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            if (id as usize) >= vocab {
                return Err(Error::Vocabulary { id, vocab_size: vocab });
            }
            idx.push(id as usize);
        }
        let tdata = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &idx {
            out.extend_from_slice(&tdata[i * d..(i + 1) * d]);
        }
        let req = self.rg(table);
        let v = self.push_node(out, vec![ids.len(), d], req);
        self.push_op(Op::EmbeddingLookup { table, ids: idx, out: v }, req);
        self.check_finite(v, "embedding_lookup")
    }

    /// Vertically stack rank-2 parts sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, n) = self.dims2(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let (m, n2) = self.dims2(p);
            if n2 != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += m;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let req = parts.iter().any(|&p| self.rg(p));
        let v = self.push_node(out, vec![rows, n], req);
        self.push_op(Op::ConcatRows { parts: parts.to_vec(), out: v }, req);
        self.check_finite(v, "concat_rows")
    }

    /// Horizontally stack rank-2 parts sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (m, _) = self.dims2(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let (m2, n) = self.dims2(p);
            if m2 != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            cols += n;
        }
        let mut out = vec![0.0; m * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, n) = self.dims2(p);
            let pdata = &self.nodes[p.0].data;
            for i in 0..m {
                out[i * cols + offset..i * cols + offset + n]
                    .copy_from_slice(&pdata[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        let req = parts.iter().any(|&p| self.rg(p));
        let v = self.push_node(out, vec![m, cols], req);
        self.push_op(Op::ConcatCols { parts: parts.to_vec(), out: v }, req);
        self.check_finite(v, "concat_cols")
    }

    /// Extract row `index` of [m,n] as a rank-1 vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if index >= m {
            return Err(Error::Contract(format!("row {index} out of {m}")));
        }
        let out = self.nodes[x.0].data[index * n..(index + 1) * n].to_vec();
        let req = self.rg(x);
        let v = self.push_node(out, vec![n], req);
        self.push_op(Op::Row { x, index, out: v }, req);
        self.check_finite(v, "row")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start >= end || end > m {
            return Err(Error::Contract(format!("slice {start}..{end} out of {m} rows")));
        }
        let out = self.nodes[x.0].data[start * n..end * n].to_vec();
        let req = self.rg(x);
        let v = self.push_node(out, vec![end - start, n], req);
        self.push_op(Op::SliceRows { x, start, out: v }, req);
        self.check_finite(v, "slice_rows")
    }

    /// Column means of [m,n] as a rank-1 vector of length n.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if m == 0 {
            return Err(Error::Contract("mean_rows of empty matrix".into()));
        }
        let xs = &self.nodes[x.0].data;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xs[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let req = self.rg(x);
        let v = self.push_node(out, vec![n], req);
        self.push_op(Op::MeanRows { x, out: v }, req);
        self.check_finite(v, "mean_rows")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].data;
        if xs.is_empty() {
            return Err(Error::Contract("mean_all of empty tensor".into()));
        }
        let out = vec![xs.iter().sum::<f64>() / xs.len() as f64];
        let req = self.rg(x);
        let v = self.push_node(out, vec![1], req);
        self.push_op(Op::MeanAll { x, out: v }, req);
        self.check_finite(v, "mean_all")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.rg(x);
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Abs { x, out: v }, req);
        self.check_finite(v, "abs")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].data.iter().any(|&v| v <= 0.0) {
            return Err(Error::DegenerateInput("ln of a non-positive value".into()));
        }
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.rg(x);
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Ln { x, out: v }, req);
        self.check_finite(v, "ln")
    }

    /// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
    ///
    /// Bitwise-identical inputs short-circuit to exactly 1.0 with zero
    /// gradient, which matches the analytic derivative at a == b.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].data.len() != self.nodes[b.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let xs = &self.nodes[a.0].data;
        let ys = &self.nodes[b.0].data;
        let req = self.rg(a) || self.rg(b);
        if xs == ys {
            let na = dot(xs, xs).sqrt();
            if na < COSINE_EPS {
                return Err(Error::DegenerateInput("cosine of zero-norm vectors".into()));
            }
            let v = self.push_node(vec![1.0], vec![1], req);
            let saved = CosSaved { identical: true, guarded_na: na, guarded_nb: na, raw: 1.0 };
            self.push_op(Op::Cosine { a, b, out: v, saved }, req);
            return Ok(v);
        }
        let na = dot(xs, xs).sqrt();
        let nb = dot(ys, ys).sqrt();
        if na < COSINE_EPS && nb < COSINE_EPS {
            return Err(Error::DegenerateInput("cosine of zero-norm vectors".into()));
        }
        let ga = na.max(COSINE_EPS);
        let gb = nb.max(COSINE_EPS);
        let raw = dot(xs, ys) / (ga * gb);
        let v = self.push_node(vec![raw.clamp(-1.0, 1.0)], vec![1], req);
        let saved = CosSaved { identical: false, guarded_na: ga, guarded_nb: gb, raw };
        self.push_op(Op::Cosine { a, b, out: v, saved }, req);
        self.check_finite(v, "cosine")
    }

    /// Elementwise sum of same-shape parts. Repeated handles accumulate
    /// gradient once per occurrence.
    pub fn sum_list(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("sum_list of zero parts".into()));
        }
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape {
                return Err(Error::ShapeMismatch {
                    op: "sum_list",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let mut out = vec![0.0; self.nodes[parts[0].0].data.len()];
        for &p in parts {
            for (o, x) in out.iter_mut().zip(&self.nodes[p.0].data) {
                *o += x;
            }
        }
        let req = parts.iter().any(|&p| self.rg(p));
        let v = self.push_node(out, shape, req);
        self.push_op(Op::SumList { parts: parts.to_vec(), out: v }, req);
        self.check_finite(v, "sum_list")
    }

    /// Pack scalar vars into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_scalars of zero parts".into()));
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.nodes[p.0].data.len() != 1 {
                return Err(Error::Contract("stack_scalars expects scalar parts".into()));
            }
            out.push(self.nodes[p.0].data[0]);
        }
        let req = parts.iter().any(|&p| self.rg(p));
        let v = self.push_node(out, vec![parts.len()], req);
        self.push_op(Op::StackScalars { parts: parts.to_vec(), out: v }, req);
        self.check_finite(v, "stack_scalars")
    }

    /// Extract element `index` of a rank-1 vector as a scalar.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = &self.nodes[x.0].data;
        if index >= xs.len() {
            return Err(Error::Contract(format!("index {index} out of {}", xs.len())));
        }
        let out = vec![xs[index]];
        let req = self.rg(x);
        let v = self.push_node(out, vec![1], req);
        self.push_op(Op::Index { x, index, out: v }, req);
        self.check_finite(v, "index")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.nodes[x.0].data.clone();
        let req = self.rg(x);
        let v = self.push_node(out, shape, req);
        self.push_op(Op::Reshape { x, out: v }, req);
        Ok(v)
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each recorded op exactly
    /// once, in reverse order; gradients land in per-node accumulators
    /// readable through `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            // Ops are moved out one at a time to appease the borrow
            // checker; the vec is restored in place.
            let op = std::mem::replace(&mut self.ops[i], Op::Reshape { x: loss, out: loss });
            self.backward_op(&op);
            self.ops[i] = op;
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn acc_at(&mut self, v: Var, offset: usize, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].data.len();
        let slot = &mut self.grads[v.0];
        let g = slot.get_or_insert_with(|| vec![0.0; numel]);
        for (gi, di) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn backward_op(&mut self, op: &Op) {
        let gout = |t: &Tape, v: Var| t.grads[v.0].clone();
        match op {
            Op::Matmul { a, b, out } => {
                if let Some(g) = gout(self, *out) {
                    let (m, k) = self.dims2(*a);
                    let (_, n) = self.dims2(*b);
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        matmul_nt_acc(&g, &self.nodes[b.0].data, m, n, k, &mut da);
                        self.acc(*a, &da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        matmul_tn_acc(&self.nodes[a.0].data, &g, m, k, n, &mut db);
                        self.acc(*b, &db);
                    }
                }
            }
            Op::MatmulNT { a, b, out } => {
                if let Some(g) = gout(self, *out) {
                    let (m, k) = self.dims2(*a);
                    let (n, _) = self.dims2(*b);
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        matmul_acc(&g, &self.nodes[b.0].data, m, n, k, &mut da);
                        self.acc(*a, &da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; n * k];
                        matmul_tn_acc(&g, &self.nodes[a.0].data, m, n, k, &mut db);
                        self.acc(*b, &db);
                    }
                }
            }
            Op::Add { a, b, out } => {
                if let Some(g) = gout(self, *out) {
                    self.acc(*a, &g);
                    self.acc(*b, &g);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(g) = gout(self, *out) {
                    self.acc(*a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.acc(*b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(g) = gout(self, *out) {
                    if self.rg(*a) {
                        let da: Vec<f64> =
                            g.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
                        self.acc(*a, &da);
                    }
                    if self.rg(*b) {
                        let db: Vec<f64> =
                            g.iter().zip(&self.nodes[a.0].data).map(|(x, y)| x * y).collect();
                        self.acc(*b, &db);
                    }
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(g) = gout(self, *out) {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.acc(*x, &dx);
                }
            }
            Op::Shift { x, out } => {
                if let Some(g) = gout(self, *out) {
                    self.acc(*x, &g);
                }
            }
            Op::AddRow { x, row, out } => {
                if let Some(g) = gout(self, *out) {
                    self.acc(*x, &g);
                    if self.rg(*row) {
                        let (m, n) = self.dims2(*x);
                        let mut dr = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                dr[j] += g[i * n + j];
                            }
                        }
                        self.acc(*row, &dr);
                    }
                }
            }
            Op::Softmax { x, axis, out } => {
                if let Some(g) = gout(self, *out) {
                    let shape = self.nodes[out.0].shape.clone();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let y = &self.nodes[out.0].data;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| o * len * inner + a * inner + i;
                            let mut s = 0.0;
                            for a in 0..len {
                                s += g[idx(a)] * y[idx(a)];
                            }
                            for a in 0..len {
                                dx[idx(a)] = y[idx(a)] * (g[idx(a)] - s);
                            }
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, out, mean, inv_std } => {
                if let Some(g) = gout(self, *out) {
                    let (m, n) = self.dims2(*x);
                    let xs = self.nodes[x.0].data.clone();
                    let gm = self.nodes[gamma.0].data.clone();
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let is = inv_std[i];
                        let mu = mean[i];
                        let grow = &g[i * n..(i + 1) * n];
                        let xrow = &xs[i * n..(i + 1) * n];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * is;
                            let dxhat = gm[j] * grow[j];
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * is;
                            let dxhat = gm[j] * grow[j];
                            dx[i * n + j] = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.acc(*x, &dx);
                    self.acc(*gamma, &dgamma);
                    self.acc(*beta, &dbeta);
                }
            }
            Op::Gelu { x, out } => {
                if let Some(g) = gout(self, *out) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(gi, &xi)| gi * gelu_deriv(xi))
                        .collect();
                    self.acc(*x, &dx);
                }
            }
            Op::EmbeddingLookup { table, ids, out } => {
                if let Some(g) = gout(self, *out) {
                    if self.rg(*table) {
                        let (_, d) = self.dims2(*table);
                        let numel = self.nodes[table.0].data.len();
                        let slot = &mut self.grads[table.0];
                        let dt = slot.get_or_insert_with(|| vec![0.0; numel]);
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += g[i * d + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows { parts, out } => {
                if let Some(g) = gout(self, *out) {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].data.len();
                        let piece = g[offset..offset + len].to_vec();
                        self.acc(p, &piece);
                        offset += len;
                    }
                }
            }
            Op::ConcatCols { parts, out } => {
                if let Some(g) = gout(self, *out) {
                    let (m, cols) = self.dims2(*out);
                    let mut offset = 0;
                    for &p in parts {
                        let (_, n) = self.dims2(p);
                        if self.rg(p) {
                            let mut dp = vec![0.0; m * n];
                            for i in 0..m {
                                dp[i * n..(i + 1) * n].copy_from_slice(
                                    &g[i * cols + offset..i * cols + offset + n],
                                );
                            }
                            self.acc(p, &dp);
                        }
                        offset += n;
                    }
                }
            }
            Op::Row { x, index, out } => {
                if let Some(g) = gout(self, *out) {
                    let (_, n) = self.dims2(*x);
                    self.acc_at(*x, index * n, &g);
                }
            }
            Op::SliceRows { x, start, out } => {
                if let Some(g) = gout(self, *out) {
                    let (_, n) = self.dims2(*x);
                    self.acc_at(*x, start * n, &g);
                }
            }
            Op::MeanRows { x, out } => {
                if let Some(g) = gout(self, *out) {
                    let (m, n) = self.dims2(*x);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[j] / m as f64;
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::MeanAll { x, out } => {
                if let Some(g) = gout(self, *out) {
                    let numel = self.nodes[x.0].data.len();
                    let dx = vec![g[0] / numel as f64; numel];
                    self.acc(*x, &dx);
                }
            }
            Op::Abs { x, out } => {
                if let Some(g) = gout(self, *out) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(gi, &xi)| gi * xi.signum() * if xi == 0.0 { 0.0 } else { 1.0 })
                        .collect();
                    self.acc(*x, &dx);
                }
            }
            Op::Ln { x, out } => {
                if let Some(g) = gout(self, *out) {
                    let dx: Vec<f64> =
                        g.iter().zip(&self.nodes[x.0].data).map(|(gi, xi)| gi / xi).collect();
                    self.acc(*x, &dx);
                }
            }
            Op::Cosine { a, b, out, saved } => {
                if let Some(g) = gout(self, *out) {
                    if saved.identical {
                        return; // exact maximum: zero gradient for both inputs
                    }
                    let g0 = g[0];
                    let ga = saved.guarded_na;
                    let gb = saved.guarded_nb;
                    let raw = saved.raw;
                    if self.rg(*a) {
                        let da: Vec<f64> = self.nodes[a.0]
                            .data
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(&ai, &bi)| g0 * (bi / (ga * gb) - raw * ai / (ga * ga)))
                            .collect();
                        self.acc(*a, &da);
                    }
                    if self.rg(*b) {
                        let db: Vec<f64> = self.nodes[a.0]
                            .data
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(&ai, &bi)| g0 * (ai / (ga * gb) - raw * bi / (gb * gb)))
                            .collect();
                        self.acc(*b, &db);
                    }
                }
            }
            Op::SumList { parts, out } => {
                if let Some(g) = gout(self, *out) {
                    for &p in parts {
                        self.acc(p, &g);
                    }
                }
            }
            Op::StackScalars { parts, out } => {
                if let Some(g) = gout(self, *out) {
                    for (i, &p) in parts.iter().enumerate() {
                        self.acc(p, &g[i..i + 1]);
                    }
                }
            }
            Op::Index { x, index, out } => {
                if let Some(g) = gout(self, *out) {
                    self.acc_at(*x, *index, &g);
                }
            }
            Op::Reshape { x, out } => {
                if x.0 == out.0 {
                    return; // placeholder left by the backward driver
                }
                if let Some(g) = gout(self, *out) {
                    self.acc(*x, &g);
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
