use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{gemm, gemm_strided, Trans};
use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel statistics of a training-mode batch norm (variance unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: Trans, tb: Trans, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddBcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar { x: Var, s: Var },
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool, dims: [usize; 3] },
    Conv1d { x: Var, w: Var, dims: [usize; 5] },
    Patchify { x: Var, dims: [usize; 4] },
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<f64> },
    SoftmaxCe { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum(Var),
    L2NormRows { x: Var, norms: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Linear record of operations; gradients are replayed in reverse.
///
/// Each tape supports exactly one [`Tape::backward`] call until
/// [`Tape::zero_grad`] clears the gradients.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(ParamId, Var)>,
    param_index: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape on which no leaf requires gradients; ops skip saving
    /// backward state.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter as a borrowed leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_index.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.is_trainable(id);
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Leaf, requires_grad: rg, grad: None });
        let v = Var(self.nodes.len() - 1);
        self.param_index.insert(id, v);
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, zero-filled when the node did not participate.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match self.grad(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad matches value shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Gradients of every trainable parameter leaf; non-participating ones are zero.
    pub fn param_grads(&self) -> ParamGrads {
        let mut out = ParamGrads::new();
        for &(id, v) in &self.params {
            if self.nodes[v.0].requires_grad {
                let g = self.nodes[v.0].grad.clone().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
                out.insert(id, g);
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----------------------------------------------------------------- ops

    fn matmul_impl(&mut self, a: Var, b: Var, ta: Trans, tb: Trans) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.as_matrix()?;
        let (rb, cb) = bv.as_matrix()?;
        let (m, k) = if ta == Trans::No { (ra, ca) } else { (ca, ra) };
        let (k2, n) = if tb == Trans::No { (rb, cb) } else { (cb, rb) };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), ta, bv.data(), tb, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb, m, k, n }, rg))
    }

    /// `a · b` for matrices `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Trans::No, Trans::No)
    }

    /// `a · bᵀ`; the shape of a linear layer applied to row vectors with
    /// weights stored as `[out×in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Trans::No, Trans::Yes)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x + b` where `b` is tiled over the rows of `x`. `b` holds either one
    /// row (`[cols]` or `[1×cols]`) or a block of rows that divides `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let cols = xv.cols();
        if bv.cols() != cols || xv.numel() % bv.numel() != 0 {
            return shape_err(format!("add_bcast: cannot tile {:?} over {:?}", bv.shape(), xv.shape()));
        }
        let bn = bv.numel();
        let data = xv.data().iter().enumerate().map(|(i, v)| v + bv.data()[i % bn]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddBcast(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("mul: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(format!("mul_scalar: scalar expected, got {:?}", self.value(s).shape()));
        }
        let c = self.value(s).item();
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulScalar { x, s }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Normalizes each row over the last dimension, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return shape_err(format!(
                "layer_norm: last dimension {d} vs gamma {:?} / beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            ));
        }
        let rows = xv.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.numel()];
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Batch normalization over `[N×C×T]` (or `[C×T]`) with per-channel affine.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, c, t) = match xv.shape() {
            [c, t] => (1, *c, *t),
            [n, c, t] => (*n, *c, *t),
            s => return shape_err(format!("batch_norm expects [N×C×T] or [C×T], got {s:?}")),
        };
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("batch_norm: {c} channels vs gamma {:?}", self.value(gamma).shape()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xv.data();
        let count = (n * t) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let train = matches!(mode, BatchNormMode::Train);
        match mode {
            BatchNormMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..n {
                        s += data[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().sum::<f64>();
                    }
                    let mu = s / count;
                    let mut ss = 0.0;
                    for bi in 0..n {
                        ss += data[(bi * c + ch) * t..(bi * c + ch + 1) * t]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
            }
            BatchNormMode::Eval { mean: m, var: v } => {
                if m.len() != c || v.len() != c {
                    return shape_err("batch_norm: running statistics do not match channel count");
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * t;
                for i in off..off + t {
                    let h = (data[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v }).collect(),
        });
        let tv = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        let v = self.push(tv, Op::BatchNorm { x, gamma, beta, xhat, rstd, train, dims: [n, c, t] }, rg);
        Ok((v, stats))
    }

    /// Stride-1 cross-correlation with symmetric zero padding; output length
    /// equals input length. `x` is `[C_in×T]` or `[N×C_in×T]`, `w` is
    /// `[C_out×C_in×k]` with odd `k`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, cin, t, batched) = match xv.shape() {
            [c, t] => (1, *c, *t, false),
            [n, c, t] => (*n, *c, *t, true),
            s => return shape_err(format!("conv1d expects [C_in×T] or [N×C_in×T], got {s:?}")),
        };
        let (cout, wcin, k) = match wv.shape() {
            [o, i, k] => (*o, *i, *k),
            s => return shape_err(format!("conv1d weight must be [C_out×C_in×k], got {s:?}")),
        };
        if k % 2 == 0 {
            return shape_err(format!("conv1d kernel size must be odd, got {k}"));
        }
        if wcin != cin {
            return shape_err(format!("conv1d channel mismatch: input has {cin}, weight expects {wcin}"));
        }
        let mut out = vec![0.0; n * cout * t];
        let mut cols = vec![0.0; cin * k * t];
        for bi in 0..n {
            im2col(&xv.data()[bi * cin * t..(bi + 1) * cin * t], cin, t, k, &mut cols);
            gemm(cout, cin * k, t, 1.0, wv.data(), Trans::No, &cols, Trans::No, 0.0, &mut out[bi * cout * t..(bi + 1) * cout * t]);
        }
        let shape = if batched { vec![n, cout, t] } else { vec![cout, t] };
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, dims: [n, cin, cout, t, k] }, rg))
    }

    /// Splits `[N×C×T]` (or `[C×T]`) into non-overlapping time windows of
    /// length `p`, giving `[N·(T/p) × C·p]`; each row is one window flattened
    /// channel-major.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, t) = match xv.shape() {
            [c, t] => (1, *c, *t),
            [n, c, t] => (*n, *c, *t),
            s => return shape_err(format!("patchify expects [C×T] or [N×C×T], got {s:?}")),
        };
        if p == 0 || t % p != 0 {
            return shape_err(format!("T mod p != 0 (T={t}, p={p})"));
        }
        let np = t / p;
        let mut out = vec![0.0; n * c * t];
        let src = xv.data();
        for bi in 0..n {
            for i in 0..np {
                let row = (bi * np + i) * c * p;
                for ch in 0..c {
                    let s = (bi * c + ch) * t + i * p;
                    out[row + ch * p..row + (ch + 1) * p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n * np, c * p], out)?, Op::Patchify { x, dims: [n, c, t, p] }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Selects rows (over the last dimension) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return shape_err("gather_rows: empty index list");
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return shape_err(format!("gather_rows: index {i} out of range for {rows} rows"));
            }
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![idx.len(), cols], out)?, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_rows: nothing to concatenate");
        };
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return shape_err(format!("concat_rows: width {} vs {cols}", v.cols()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Scaled dot-product attention over `[B·S × D]` inputs grouped into
    /// blocks of `seq` rows, split into `heads` heads. With `causal`, row `i`
    /// of a block attends to rows `0..=i` of that block only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.as_matrix()?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?} must match",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        if seq == 0 || rows % seq != 0 || heads == 0 || d % heads != 0 {
            return shape_err(format!("attention: {rows} rows, seq {seq}, width {d}, heads {heads}"));
        }
        let blocks = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; blocks * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..blocks {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm_strided(seq, dh, seq, scale, &qv.data()[off..], d, 1, &kv.data()[off..], 1, d, 0.0, p, seq, 1);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let lim = if causal { i + 1 } else { seq };
                    let mx = row[..lim].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in &mut row[..lim] {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in &mut row[..lim] {
                        *x /= z;
                    }
                    for x in &mut row[lim..] {
                        *x = 0.0;
                    }
                }
                gemm_strided(seq, seq, dh, 1.0, p, seq, 1, &vv.data()[off..], d, 1, 0.0, &mut out[off..], d, 1);
            }
        }
        let rg = self.rg(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::Attention { q, k, v, seq, heads, probs }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` `[N×V]`; positions equal to `ignore_index` are skipped.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.as_matrix()?;
        if targets.len() != n {
            return shape_err(format!("cross entropy: {} targets for {n} rows", targets.len()));
        }
        let mut tg = Vec::with_capacity(n);
        for &t in targets {
            if t == ignore_index {
                tg.push(None);
            } else if t < vocab {
                tg.push(Some(t));
            } else {
                return shape_err(format!("cross entropy: target {t} outside [0, {vocab})"));
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![0.0; n * vocab];
        let mut loss = 0.0;
        for (r, t) in tg.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = lv.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[*t];
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - lse).exp();
            }
        }
        loss /= count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, targets: tg, probs, count }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = nrm;
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::L2NormRows { x, norms }, rg)
    }

    // ------------------------------------------------------------ backward

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Each node is visited once, in reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Shape("loss does not belong to this tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    let bt = flip(*tb);
                    match ta {
                        Trans::No => gemm(m, n, k, 1.0, g, Trans::No, val(*b).data(), bt, 0.0, &mut da),
                        Trans::Yes => gemm(k, n, m, 1.0, val(*b).data(), *tb, g, Trans::Yes, 0.0, &mut da),
                    }
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    match tb {
                        Trans::No => gemm(k, m, n, 1.0, val(*a).data(), flip(*ta), g, Trans::No, 0.0, &mut db),
                        Trans::Yes => gemm(n, m, k, 1.0, g, Trans::Yes, val(*a).data(), *ta, 0.0, &mut db),
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(*v) {
                        out.push((*v, g.to_vec()));
                    }
                }
            }
            Op::AddBcast(x, b) => {
                if rg(*x) {
                    out.push((*x, g.to_vec()));
                }
                if rg(*b) {
                    let bn = val(*b).numel();
                    let mut db = vec![0.0; bn];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % bn] += gi;
                    }
                    out.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::MulScalar { x, s } => {
                let c = val(*s).item();
                if rg(*x) {
                    out.push((*x, g.iter().map(|v| v * c).collect()));
                }
                if rg(*s) {
                    let ds: f64 = g.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    out.push((*s, vec![ds]));
                }
            }
            Op::Exp(x) => out.push((*x, g.iter().zip(node.value.data()).map(|(a, y)| a * y).collect())),
            Op::Relu(x) => out.push((
                *x,
                g.iter().zip(val(*x).data()).map(|(a, v)| if *v > 0.0 { *a } else { 0.0 }).collect(),
            )),
            Op::Gelu(x) => out.push((*x, g.iter().zip(val(*x).data()).map(|(a, v)| a * gelu_grad(*v)).collect())),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*x).cols();
                let rows = rstd.len();
                let gm = val(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    if rg(*gamma) {
                        out.push((*gamma, dg));
                    }
                    if rg(*beta) {
                        out.push((*beta, db));
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        s1 /= d as f64;
                        s2 /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            dx[r * d + j] = rstd[r] * (dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train, dims } => {
                let [n, c, t] = *dims;
                let gm = val(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * t;
                        for i in off..off + t {
                            dg[ch] += g[i] * xhat[i];
                            db[ch] += g[i];
                        }
                    }
                }
                if rg(*x) {
                    let cnt = (n * t) as f64;
                    let mut dx = vec![0.0; n * c * t];
                    for ch in 0..c {
                        // Sums over the normalized group are dbeta and dgamma scaled by gamma.
                        let s1 = db[ch] * gm[ch] / cnt;
                        let s2 = dg[ch] * gm[ch] / cnt;
                        for bi in 0..n {
                            let off = (bi * c + ch) * t;
                            for i in off..off + t {
                                let dh = g[i] * gm[ch];
                                dx[i] = if *train { rstd[ch] * (dh - s1 - xhat[i] * s2) } else { rstd[ch] * dh };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dg));
                }
                if rg(*beta) {
                    out.push((*beta, db));
                }
            }
            Op::Conv1d { x, w, dims } => {
                let [n, cin, cout, t, k] = *dims;
                let xd = val(*x).data();
                let wd = val(*w).data();
                let mut cols = vec![0.0; cin * k * t];
                let mut dw = if rg(*w) { vec![0.0; cout * cin * k] } else { Vec::new() };
                let mut dx = if rg(*x) { vec![0.0; n * cin * t] } else { Vec::new() };
                let mut dcols = vec![0.0; cin * k * t];
                for bi in 0..n {
                    let gy = &g[bi * cout * t..(bi + 1) * cout * t];
                    if rg(*w) {
                        im2col(&xd[bi * cin * t..(bi + 1) * cin * t], cin, t, k, &mut cols);
                        gemm(cout, t, cin * k, 1.0, gy, Trans::No, &cols, Trans::Yes, 1.0, &mut dw);
                    }
                    if rg(*x) {
                        gemm(cin * k, cout, t, 1.0, wd, Trans::Yes, gy, Trans::No, 0.0, &mut dcols);
                        col2im(&dcols, cin, t, k, &mut dx[bi * cin * t..(bi + 1) * cin * t]);
                    }
                }
                if rg(*w) {
                    out.push((*w, dw));
                }
                if rg(*x) {
                    out.push((*x, dx));
                }
            }
            Op::Patchify { x, dims } => {
                let [n, c, t, p] = *dims;
                let np = t / p;
                let mut dx = vec![0.0; n * c * t];
                for bi in 0..n {
                    for i in 0..np {
                        let row = (bi * np + i) * c * p;
                        for ch in 0..c {
                            let s = (bi * c + ch) * t + i * p;
                            dx[s..s + p].copy_from_slice(&g[row + ch * p..row + (ch + 1) * p]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[i * cols + j] += g[r * cols + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).numel();
                    if rg(*p) {
                        out.push((*p, g[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).as_matrix().expect("transpose input is a matrix");
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                out.push((*x, dx));
            }
            Op::Attention { q, k, v, seq, heads, probs } => {
                let (seq, heads) = (*seq, *heads);
                let (rows, d) = val(*q).as_matrix().expect("attention inputs are matrices");
                let blocks = rows / seq;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..blocks {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        gemm_strided(seq, seq, dh, 1.0, p, 1, seq, &g[off..], d, 1, 0.0, &mut dv[off..], d, 1);
                        gemm_strided(seq, dh, seq, 1.0, &g[off..], d, 1, &vd[off..], 1, d, 0.0, &mut dp, seq, 1);
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot);
                            }
                        }
                        gemm_strided(seq, seq, dh, scale, &dp, seq, 1, &kd[off..], d, 1, 0.0, &mut dq[off..], d, 1);
                        gemm_strided(seq, seq, dh, scale, &dp, 1, seq, &qd[off..], d, 1, 0.0, &mut dk[off..], d, 1);
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if rg(var) {
                        out.push((var, grad));
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs, count } => {
                let vocab = val(*logits).cols();
                let s = g[0] / *count as f64;
                let mut dl = vec![0.0; targets.len() * vocab];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..vocab {
                        dl[r * vocab + j] = s * probs[r * vocab + j];
                    }
                    dl[r * vocab + t] -= s;
                }
                out.push((*logits, dl));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::L2NormRows { x, norms } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, nrm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = (gr[j] - yr[j] * dot) / nrm;
                    }
                }
                out.push((*x, dx));
            }
        }
        out.retain(|(v, _)| rg(*v));
        out
    }
}

fn flip(t: Trans) -> Trans {
    match t {
        Trans::No => Trans::Yes,
        Trans::Yes => Trans::No,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Unfolds `[C×T]` into `[(C·k)×T]` columns for same-padded convolution.
fn im2col(x: &[f64], c: usize, t: usize, k: usize, cols: &mut [f64]) {
    let pad = (k - 1) / 2;
    for ch in 0..c {
        let src = &x[ch * t..(ch + 1) * t];
        for j in 0..k {
            let dst = &mut cols[(ch * k + j) * t..(ch * k + j + 1) * t];
            // dst[s] = src[s + j - pad]
            for (s, d) in dst.iter_mut().enumerate() {
                let idx = s as isize + j as isize - pad as isize;
                *d = if idx >= 0 && (idx as usize) < t { src[idx as usize] } else { 0.0 };
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, t: usize, k: usize, dx: &mut [f64]) {
    let pad = (k - 1) / 2;
    for ch in 0..c {
        for j in 0..k {
            let src = &cols[(ch * k + j) * t..(ch * k + j + 1) * t];
            for (s, v) in src.iter().enumerate() {
                let idx = s as isize + j as isize - pad as isize;
                if idx >= 0 && (idx as usize) < t {
                    dx[ch * t + idx as usize] += v;
                }
            }
        }
    }
}
