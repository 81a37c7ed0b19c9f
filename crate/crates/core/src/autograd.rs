//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as a node holding its forward value. Nodes are
//! appended in evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it once in reverse. Values are immutable once recorded.

use std::sync::Arc;

use crate::error::{contract, dim_err, Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    OneHotRows(Var, Vec<usize>),
    Sparse(Var, Arc<SparseMatrix<T>>),
    Softmax(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    MeanAxis(Var, usize),
    CosineRows(Var, Var),
    L2Distance(Var, Var),
    Focal {
        logits: Var,
        targets: Vec<T>,
        alpha: T,
        gamma: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape. One graph per forward pass; confined to a single thread.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn row_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are accumulated only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last backward target with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape matches value"))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---- linear algebra -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    /// Constant sparse map applied on the left: `S · x`.
    pub fn sparse_mm(&mut self, s: &Arc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let out = s.apply(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sparse(x, Arc::clone(s)), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let idx: Vec<usize> = (0..n * m).map(|o| (o % m) * n + o / m).collect();
        self.gather(x, Arc::new(idx), &[n, m])
    }

    // ---- elementwise ---------------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(b).len() != n {
            return Err(dim_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bb) in out[r * n..(r + 1) * n].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(x, b), rg))
    }

    /// `x[m,n] * s[m]`, scaling each row by its own factor.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(s).len() != m {
            return Err(dim_err("mul_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for o in &mut out[r * n..(r + 1) * n] {
                *o *= sv[r];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MulRows(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(v, Op::Softplus(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let v = self
            .value(x)
            .map(|z| half * z * (T::one() + (c * (z + a * z * z * z)).tanh()));
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    // ---- shape manipulation --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Flat gather: `out[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let xv = self.value(x);
        if n != idx.len() {
            return Err(dim_err("gather", shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(contract(format!(
                "gather index {bad} out of range for {} elements",
                xv.len()
            )));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather(x, idx), rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(contract(format!("row {bad} out of range for {m} rows")));
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(x, Arc::new(idx), &[rows.len(), n])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(contract(format!(
                "column slice {start}..{} exceeds {n} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks `k` one-hot rows of length `cols`; row `i` holds `values[i]` at column `idx[i]`.
    pub fn one_hot_rows(&mut self, values: Var, idx: &[usize], cols: usize) -> Result<Var> {
        let vals = self.value(values);
        if vals.len() != idx.len() {
            return Err(dim_err("one_hot_rows", vals.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(contract(format!("index {bad} out of range for {cols} columns")));
        }
        let k = idx.len();
        let mut out = vec![T::zero(); k * cols];
        for (i, &c) in idx.iter().enumerate() {
            out[i * cols + c] = vals.data()[i];
        }
        let rg = self.rg(values);
        Ok(self.push(
            Tensor::new(&[k, cols], out)?,
            Op::OneHotRows(values, idx.to_vec()),
            rg,
        ))
    }

    // ---- reductions and normalisations ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean of a matrix along `axis` (0 → one value per column, 1 → one per row).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let d = self.value(x).data();
        let out = match axis {
            0 => {
                let mut acc = vec![T::zero(); n];
                for r in 0..m {
                    for (a, &v) in acc.iter_mut().zip(&d[r * n..(r + 1) * n]) {
                        *a += v;
                    }
                }
                let inv = T::one() / T::lit(m as f64);
                acc.into_iter().map(|v| v * inv).collect::<Vec<_>>()
            }
            1 => {
                let inv = T::one() / T::lit(n as f64);
                (0..m)
                    .map(|r| d[r * n..(r + 1) * n].iter().copied().sum::<T>() * inv)
                    .collect()
            }
            _ => return Err(contract(format!("mean_axis: axis {axis} on a matrix"))),
        };
        let len = out.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[len], out)?, Op::MeanAxis(x, axis), rg))
    }

    /// Row-wise `softmax(scale · x)` over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var, scale: T) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(contract("softmax over empty rows"));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = ((*v - mx) * scale).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x, scale), rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nn = T::lit(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
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

    /// Cosine similarity of a single vector `a` (length C) against every row of `b[L,C]`.
    /// A zero-norm operand yields 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (l, c) = self.dims2(b)?;
        if self.value(a).len() != c {
            return Err(dim_err("cosine_rows", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let na = row_norm(av);
        let out: Vec<T> = (0..l)
            .map(|r| {
                let row = &bv[r * c..(r + 1) * c];
                let nb = row_norm(row);
                if na == T::zero() || nb == T::zero() {
                    T::zero()
                } else {
                    let dot: T = av.iter().zip(row).map(|(&x, &y)| x * y).sum();
                    (dot / (na * nb)).max(-T::one()).min(T::one())
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[l], out)?, Op::CosineRows(a, b), rg))
    }

    /// Euclidean distance between two equally-shaped tensors.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err("l2_distance", self.shape(a), self.shape(b)));
        }
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(d), Op::L2Distance(a, b), rg))
    }

    /// Mean focal loss of logits against binary targets.
    pub fn focal_loss(&mut self, logits: Var, targets: &[T], alpha: T, gamma: T) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(dim_err("focal_loss", self.shape(logits), &[targets.len()]));
        }
        if targets.iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(contract("focal loss targets must be binary"));
        }
        let mut total = T::zero();
        for (&zi, &yi) in z.iter().zip(targets) {
            let positive = yi == T::one();
            let zt = if positive { zi } else { -zi };
            let at = if positive { alpha } else { T::one() - alpha };
            let q = sigmoid(-zt);
            total += at * q.powf(gamma) * softplus(-zt);
        }
        let n = T::lit(z.len().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(contract(
                "backward called twice on the same tape without zero_grad",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        macro_rules! buf {
            ($v:expr) => {
{
                let var: Var = *$v;
                grads[var.0].get_or_insert_with(|| vec![T::zero(); len(var)])
            }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matrix");
                let n = node.value.dims2().expect("matrix").1;
                if want(*a) {
                    gemm_nt(g, nodes[b.0].value.data(), buf!(a), m, n, k);
                }
                if want(*b) {
                    gemm_tn(nodes[a.0].value.data(), g, buf!(b), k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matrix");
                let n = node.value.dims2().expect("matrix").1;
                if want(*a) {
                    gemm_nn(g, nodes[b.0].value.data(), buf!(a), m, n, k);
                }
                if want(*b) {
                    gemm_tn(g, nodes[a.0].value.data(), buf!(b), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(*v) {
                        for (o, &gv) in buf!(v).iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    for (o, &gv) in buf!(a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if want(*b) {
                    for (o, &gv) in buf!(b).iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = nodes[b.0].value.data();
                    for ((o, &gv), &y) in buf!(a).iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if want(*b) {
                    let av = nodes[a.0].value.data();
                    for ((o, &gv), &x) in buf!(b).iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let n = len(*b);
                if want(*x) {
                    for (o, &gv) in buf!(x).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if want(*b) {
                    let gb = buf!(b);
                    for row in g.chunks(n) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::MulRows(x, s) => {
                let m = len(*s);
                let n = len(*x) / m.max(1);
                if want(*x) {
                    let sv = nodes[s.0].value.data();
                    let gx = buf!(x);
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[r * n + c] * sv[r];
                        }
                    }
                }
                if want(*s) {
                    let xv = nodes[x.0].value.data();
                    let gs = buf!(s);
                    for r in 0..m {
                        let mut acc = T::zero();
                        for c in 0..n {
                            acc += g[r * n + c] * xv[r * n + c];
                        }
                        gs[r] += acc;
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    for (o, &gv) in buf!(x).iter_mut().zip(g) {
                        *o += gv * *c;
                    }
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    for (o, &gv) in buf!(x).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Gather(x, idx) => {
                if want(*x) {
                    let gx = buf!(x);
                    for (&src, &gv) in idx.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.dims2().expect("matrix").0;
                let total = node.value.len() / m.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = len(*p) / m.max(1);
                    if want(*p) {
                        let gp = buf!(p);
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                if want(*x) {
                    let (m, w) = node.value.dims2().expect("matrix");
                    let n = len(*x) / m.max(1);
                    let gx = buf!(x);
                    for r in 0..m {
                        for c in 0..w {
                            gx[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::OneHotRows(values, idx) => {
                if want(*values) {
                    let cols = node.value.dims2().expect("matrix").1;
                    let gv = buf!(values);
                    for (i, &c) in idx.iter().enumerate() {
                        gv[i] += g[i * cols + c];
                    }
                }
            }
            Op::Sparse(x, s) => {
                if want(*x) {
                    let n = node.value.dims2().expect("matrix").1;
                    s.apply_transpose_acc(g, buf!(x), n);
                }
            }
            Op::Softmax(x, scale) => {
                if want(*x) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().expect("rows");
                    let gx = buf!(x);
                    for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += *scale * yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = len(*gamma);
                let gam = nodes[gamma.0].value.data();
                if want(*gamma) {
                    let gg = buf!(gamma);
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if want(*beta) {
                    let gb = buf!(beta);
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            gb[c] += gr[c];
                        }
                    }
                }
                if want(*x) {
                    let nn = T::lit(n as f64);
                    let gx = buf!(x);
                    for (r, ((hr, gr), or)) in xhat
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        let k = rstd[r] / nn;
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            or[c] += k * (nn * dh - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let c = T::lit(GELU_C);
                    let a = T::lit(GELU_A);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let xv = nodes[x.0].value.data();
                    for ((o, &gv), &z) in buf!(x).iter_mut().zip(g).zip(xv) {
                        let t = (c * (z + a * z * z * z)).tanh();
                        let d = half * (T::one() + t)
                            + half * z * (T::one() - t * t) * c * (T::one() + three * a * z * z);
                        *o += gv * d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if want(*x) {
                    let y = node.value.data();
                    for ((o, &gv), &yv) in buf!(x).iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Softplus(x) => {
                if want(*x) {
                    let xv = nodes[x.0].value.data();
                    for ((o, &gv), &z) in buf!(x).iter_mut().zip(g).zip(xv) {
                        *o += gv * sigmoid(z);
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    for o in buf!(x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                if want(*x) {
                    let (m, n) = nodes[x.0].value.dims2().expect("matrix");
                    let gx = buf!(x);
                    if *axis == 0 {
                        let inv = T::one() / T::lit(m as f64);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] += g[c] * inv;
                            }
                        }
                    } else {
                        let inv = T::one() / T::lit(n as f64);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] += g[r] * inv;
                            }
                        }
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let c = av.len();
                let cos = node.value.data();
                let na = row_norm(av);
                if na == T::zero() {
                    return;
                }
                let mut ga = vec![T::zero(); c];
                let mut gb = vec![T::zero(); bv.len()];
                for (r, (&gr, &cr)) in g.iter().zip(cos).enumerate() {
                    let row = &bv[r * c..(r + 1) * c];
                    let nb = row_norm(row);
                    if nb == T::zero() || gr == T::zero() {
                        continue;
                    }
                    let inv = T::one() / (na * nb);
                    for d in 0..c {
                        ga[d] += gr * (row[d] * inv - cr * av[d] / (na * na));
                        gb[r * c + d] += gr * (av[d] * inv - cr * row[d] / (nb * nb));
                    }
                }
                if want(*a) {
                    for (o, v) in buf!(a).iter_mut().zip(ga) {
                        *o += v;
                    }
                }
                if want(*b) {
                    for (o, v) in buf!(b).iter_mut().zip(gb) {
                        *o += v;
                    }
                }
            }
            Op::L2Distance(a, b) => {
                let d = node.value.data()[0];
                if d == T::zero() {
                    return;
                }
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let k = g[0] / d;
                if want(*a) {
                    for ((o, &x), &y) in buf!(a).iter_mut().zip(av).zip(bv) {
                        *o += k * (x - y);
                    }
                }
                if want(*b) {
                    for ((o, &x), &y) in buf!(b).iter_mut().zip(av).zip(bv) {
                        *o -= k * (x - y);
                    }
                }
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                if want(*logits) {
                    let z = nodes[logits.0].value.data();
                    let scale = g[0] / T::lit(z.len().max(1) as f64);
                    for ((o, &zi), &yi) in buf!(logits).iter_mut().zip(z).zip(targets) {
                        let positive = yi == T::one();
                        let zt = if positive { zi } else { -zi };
                        let at = if positive { *alpha } else { T::one() - *alpha };
                        let q = sigmoid(-zt);
                        let pt = T::one() - q;
                        let dzt = -at * q.powf(*gamma) * (*gamma * pt * softplus(-zt) + q);
                        *o += scale * if positive { dzt } else { -dzt };
                    }
                }
            }
        }
    }
}
