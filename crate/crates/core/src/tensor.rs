//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values are row-major `Vec<f64>` buffers. A `Tape` records every operation
//! as it executes; `backward` replays the record once in reverse. The op set
//! is exactly what a small transformer needs, nothing more. No graphs survive
//! across steps: each optimization step builds a fresh tape.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

// ── Value type ──────────────────────────────────────────────────────────────

/// A plain tensor value. Carries no tape identity; `Var` handles do.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::contract(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![v], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Handle to a node on a `Tape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var),
    TakePosition(Var, usize),
    SoftmaxLastDim(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, active: Vec<bool> },
    Sum(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    param: Option<ParamId>,
}

/// Records operations for one forward pass and differentiates them.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, grad: None, op, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Record a tensor that takes no gradient role of its own (inputs, masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf)
    }

    /// Record one parameter as a leaf, remembering where its gradient goes.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.push(params.shape(id).to_vec(), params.data(id).to_vec(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Leaf-register every parameter; index the result by `ParamId`.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        (0..params.len()).map(|i| self.param(params, ParamId(i))).collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor { shape: node.shape.clone(), data: node.data.clone(), grad: node.grad.clone() }
    }

    /// Gradient buffer of `v`; `None` before `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn value_scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.data.len() != 1 {
            return Err(Error::contract("value_scalar", format!("shape {:?} is not scalar", node.shape)));
        }
        Ok(node.data[0])
    }

    // ── Forward ops ─────────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: Var, b: Var, which: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: which,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let n = numel(&out_shape);
        let mut data = vec![0.0; n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            let map_a = BroadcastMap::new(&out_shape, &sa);
            let map_b = BroadcastMap::new(&out_shape, &sb);
            for (i, slot) in data.iter_mut().enumerate() {
                let x = da[map_a.src_index(i)];
                let y = db[map_b.src_index(i)];
                *slot = match which {
                    "add" => x + y,
                    "sub" => x - y,
                    _ => x * y,
                };
            }
        }
        let op = match which {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(out_shape, data, op))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(shape, data, Op::Scale(a, c))
    }

    /// Batched matrix product. The last two axes are matrix axes; leading axes
    /// broadcast against each other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let dims = MatmulDims::resolve(&sa, &sb)?;
        let mut out = vec![0.0; numel(&dims.out_shape)];
        matmul_kernel(
            &dims,
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
        );
        Ok(self.push(dims.out_shape.clone(), out, Op::Matmul(a, b)))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::contract("transpose_last2", format!("need rank >= 2, got {:?}", shape)));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel(&shape) / (rows * cols);
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for bi in 0..batch {
            let off = bi * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    data[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        Ok(self.push(out_shape, data, Op::TransposeLast2(a)))
    }

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        let old = self.shape(a).to_vec();
        if numel(&old) != numel(&new_shape) {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: old, rhs: new_shape });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(new_shape, data, Op::Reshape(a)))
    }

    /// `[B, N, E] -> [B, H, N, E/H]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::contract("split_heads", format!("need [B, N, E], got {:?}", s)));
        }
        let (b, n, e) = (s[0], s[1], s[2]);
        if heads == 0 || e % heads != 0 {
            return Err(Error::contract(
                "split_heads",
                format!("head count {} must divide embedding width {}", heads, e),
            ));
        }
        let dh = e / heads;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    for d in 0..dh {
                        data[((bi * heads + h) * n + i) * dh + d] = src[(bi * n + i) * e + h * dh + d];
                    }
                }
            }
        }
        Ok(self.push(vec![b, heads, n, dh], data, Op::SplitHeads(a, heads)))
    }

    /// `[B, H, N, Dh] -> [B, N, H*Dh]`. Inverse of `split_heads`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::contract("merge_heads", format!("need [B, H, N, Dh], got {:?}", s)));
        }
        let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
        let e = h * dh;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..n {
                    for d in 0..dh {
                        data[(bi * n + i) * e + hi * dh + d] = src[((bi * h + hi) * n + i) * dh + d];
                    }
                }
            }
        }
        Ok(self.push(vec![b, n, e], data, Op::MergeHeads(a)))
    }

    /// Select one sequence position: `[B, N, E] -> [B, E]`.
    pub fn take_position(&mut self, a: Var, pos: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::contract("take_position", format!("need [B, N, E], got {:?}", s)));
        }
        let (b, n, e) = (s[0], s[1], s[2]);
        if pos >= n {
            return Err(Error::IndexOutOfRange { what: "position", index: pos, limit: n });
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; b * e];
        for bi in 0..b {
            data[bi * e..(bi + 1) * e].copy_from_slice(&src[(bi * n + pos) * e..(bi * n + pos) * e + e]);
        }
        Ok(self.push(vec![b, e], data, Op::TakePosition(a, pos)))
    }

    /// Numerically stable softmax over the last axis. Rejects NaN input.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::contract("softmax_lastdim", "need rank >= 1, got scalar".to_string()));
        }
        let last = shape[shape.len() - 1];
        let src = &self.nodes[a.0].data;
        if src.iter().any(|x| x.is_nan()) {
            return Err(Error::numeric("softmax_lastdim", "NaN in input"));
        }
        let mut data = vec![0.0; src.len()];
        for (row_src, row_dst) in src.chunks(last).zip(data.chunks_mut(last)) {
            let max = row_src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, s) in row_dst.iter_mut().zip(row_src) {
                *d = (s - max).exp();
                sum += *d;
            }
            for d in row_dst.iter_mut() {
                *d /= sum;
            }
        }
        Ok(self.push(shape, data, Op::SoftmaxLastDim(a)))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        self.push(shape, data, Op::Gelu(a))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply the
    /// learned elementwise affine `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::contract("layer_norm", "need rank >= 1, got scalar".to_string()));
        }
        let d = shape[shape.len() - 1];
        let sg = self.shape(gain).to_vec();
        let sb = self.shape(bias).to_vec();
        if sg != [d] {
            return Err(Error::ShapeMismatch { op: "layer_norm gain", lhs: shape, rhs: sg });
        }
        if sb != [d] {
            return Err(Error::ShapeMismatch { op: "layer_norm bias", lhs: shape, rhs: sb });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for (row_src, row_dst) in src.chunks(d).zip(data.chunks_mut(d)) {
            let mean = row_src.iter().sum::<f64>() / d as f64;
            let var = row_src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                row_dst[i] = g[i] * ((row_src[i] - mean) * inv) + b[i];
            }
        }
        Ok(self.push(shape, data, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Row gather: `out[r, :] = table[ids[r], :]`, reshaped to `prefix + [E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::contract("embedding", format!("table must be [V, E], got {:?}", ts)));
        }
        let (v, e) = (ts[0], ts[1]);
        if numel(prefix) != ids.len() {
            return Err(Error::contract(
                "embedding",
                format!("prefix {:?} wants {} ids, got {}", prefix, numel(prefix), ids.len()),
            ));
        }
        let src = &self.nodes[table.0].data;
        let mut data = vec![0.0; ids.len() * e];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::IndexOutOfRange { what: "embedding id", index: id, limit: v });
            }
            data[r * e..(r + 1) * e].copy_from_slice(&src[id * e..(id + 1) * e]);
        }
        let mut shape = prefix.to_vec();
        shape.push(e);
        Ok(self.push(shape, data, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    /// `logits` is `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let active = vec![true; targets.len()];
        self.cross_entropy_masked(logits, targets, &active)
    }

    /// Like `cross_entropy`, but rows with `active[r] == false` are excluded
    /// from the mean (padding positions in sequence losses).
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::contract("cross_entropy", format!("logits must be [rows, classes], got {:?}", s)));
        }
        let (rows, classes) = (s[0], s[1]);
        if targets.len() != rows || active.len() != rows {
            return Err(Error::contract(
                "cross_entropy",
                format!("{} logit rows but {} targets / {} active flags", rows, targets.len(), active.len()),
            ));
        }
        let n_active = active.iter().filter(|a| **a).count();
        if n_active == 0 {
            return Err(Error::contract("cross_entropy", "no active rows".to_string()));
        }
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(Error::IndexOutOfRange { what: "target class", index: t, limit: classes });
            }
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / n_active as f64;
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), active: active.to_vec() },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].data.iter().sum();
        self.push(Vec::new(), vec![total], Op::Sum(a))
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills gradient buffers for every node
    /// recorded up to `loss`; leaves that do not feed the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        for node in self.nodes.iter_mut().take(loss.0 + 1) {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            // Op data needed below is copied out first to satisfy borrowing.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let out_shape = self.nodes[i].shape.clone();
                    self.bcast_accumulate(a, &out_shape, &g, |_, gi| gi);
                    self.bcast_accumulate(b, &out_shape, &g, |_, gi| gi);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    let out_shape = self.nodes[i].shape.clone();
                    self.bcast_accumulate(a, &out_shape, &g, |_, gi| gi);
                    self.bcast_accumulate(b, &out_shape, &g, |_, gi| -gi);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let out_shape = self.nodes[i].shape.clone();
                    let map_b = BroadcastMap::new(&out_shape, self.shape(b));
                    let db: Vec<f64> = (0..g.len()).map(|j| self.nodes[b.0].data[map_b.src_index(j)]).collect();
                    let map_a = BroadcastMap::new(&out_shape, self.shape(a));
                    let da: Vec<f64> = (0..g.len()).map(|j| self.nodes[a.0].data[map_a.src_index(j)]).collect();
                    self.bcast_accumulate(a, &out_shape, &g, |j, gi| gi * db[j]);
                    self.bcast_accumulate(b, &out_shape, &g, |j, gi| gi * da[j]);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for (slot, gi) in ga.iter_mut().zip(&g) {
                        *slot += gi * c;
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let dims = MatmulDims::resolve(self.shape(a), self.shape(b)).expect("recorded matmul");
                    let (da, db) = matmul_backward(&dims, &self.nodes[a.0].data, &self.nodes[b.0].data, &g);
                    accumulate(self.nodes[a.0].grad.as_mut().unwrap(), &da);
                    accumulate(self.nodes[b.0].grad.as_mut().unwrap(), &db);
                }
                Op::TransposeLast2(a) => {
                    let a = *a;
                    let out_shape = self.nodes[i].shape.clone();
                    let n = out_shape.len();
                    let (rows, cols) = (out_shape[n - 2], out_shape[n - 1]);
                    let batch = g.len() / (rows * cols);
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for bi in 0..batch {
                        let off = bi * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[off + c * rows + r] += g[off + r * cols + c];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let a = *a;
                    accumulate(self.nodes[a.0].grad.as_mut().unwrap(), &g);
                }
                Op::SplitHeads(a, heads) => {
                    let (a, heads) = (*a, *heads);
                    let s = self.nodes[a.0].shape.clone();
                    let (b, n, e) = (s[0], s[1], s[2]);
                    let dh = e / heads;
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for bi in 0..b {
                        for h in 0..heads {
                            for ni in 0..n {
                                for d in 0..dh {
                                    ga[(bi * n + ni) * e + h * dh + d] += g[((bi * heads + h) * n + ni) * dh + d];
                                }
                            }
                        }
                    }
                }
                Op::MergeHeads(a) => {
                    let a = *a;
                    let s = self.nodes[a.0].shape.clone();
                    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
                    let e = h * dh;
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for bi in 0..b {
                        for hi in 0..h {
                            for ni in 0..n {
                                for d in 0..dh {
                                    ga[((bi * h + hi) * n + ni) * dh + d] += g[(bi * n + ni) * e + hi * dh + d];
                                }
                            }
                        }
                    }
                }
                Op::TakePosition(a, pos) => {
                    let (a, pos) = (*a, *pos);
                    let s = self.nodes[a.0].shape.clone();
                    let (b, n, e) = (s[0], s[1], s[2]);
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for bi in 0..b {
                        for d in 0..e {
                            ga[(bi * n + pos) * e + d] += g[bi * e + d];
                        }
                    }
                }
                Op::SoftmaxLastDim(a) => {
                    let a = *a;
                    let shape = self.nodes[i].shape.clone();
                    let last = shape[shape.len() - 1];
                    let s = self.nodes[i].data.clone();
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for (row, (srow, grow)) in s.chunks(last).zip(g.chunks(last)).enumerate() {
                        let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                        for k in 0..last {
                            ga[row * last + k] += srow[k] * (grow[k] - dot);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let xs = self.nodes[a.0].data.clone();
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for (slot, (x, gi)) in ga.iter_mut().zip(xs.iter().zip(&g)) {
                        *slot += gi * gelu_grad_scalar(*x);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let shape = self.nodes[x.0].shape.clone();
                    let d = shape[shape.len() - 1];
                    let xs = self.nodes[x.0].data.clone();
                    let gs = self.nodes[gain.0].data.clone();
                    let rows = xs.len() / d;
                    let mut dx = vec![0.0; xs.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xs[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                        let dxhat: Vec<f64> = grow.iter().zip(&gs).map(|(gi, gn)| gi * gn).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            dx[r * d + k] +=
                                inv / d as f64 * (d as f64 * dxhat[k] - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                            dgain[k] += grow[k] * xhat[k];
                            dbias[k] += grow[k];
                        }
                    }
                    accumulate(self.nodes[x.0].grad.as_mut().unwrap(), &dx);
                    accumulate(self.nodes[gain.0].grad.as_mut().unwrap(), &dgain);
                    accumulate(self.nodes[bias.0].grad.as_mut().unwrap(), &dbias);
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let e = self.nodes[table.0].shape[1];
                    let gt = self.nodes[table.0].grad.as_mut().unwrap();
                    for (r, id) in ids.iter().enumerate() {
                        for d in 0..e {
                            gt[id * e + d] += g[r * e + d];
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, active } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let active = active.clone();
                    let s = self.nodes[logits.0].shape.clone();
                    let classes = s[1];
                    let n_active = active.iter().filter(|a| **a).count() as f64;
                    let src = self.nodes[logits.0].data.clone();
                    let gl = self.nodes[logits.0].grad.as_mut().unwrap();
                    let upstream = g[0];
                    for (r, (&t, &on)) in targets.iter().zip(&active).enumerate() {
                        if !on {
                            continue;
                        }
                        let row = &src[r * classes..(r + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for k in 0..classes {
                            let p = exps[k] / sum;
                            let delta = if k == t { 1.0 } else { 0.0 };
                            gl[r * classes + k] += upstream * (p - delta) / n_active;
                        }
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for slot in ga.iter_mut() {
                        *slot += g[0];
                    }
                }
            }
        }
        Ok(())
    }

    fn bcast_accumulate(&mut self, target: Var, out_shape: &[usize], g: &[f64], f: impl Fn(usize, f64) -> f64) {
        let map = BroadcastMap::new(out_shape, &self.nodes[target.0].shape.clone());
        let gt = self.nodes[target.0].grad.as_mut().unwrap();
        for (j, gi) in g.iter().enumerate() {
            gt[map.src_index(j)] += f(j, *gi);
        }
    }

    /// Copy parameter gradients back into their `ParamSet` slots.
    pub fn export_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let (Some(id), Some(grad)) = (node.param, &node.grad) {
                params.accumulate_grad(id, grad);
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

// ── Broadcasting ────────────────────────────────────────────────────────────

/// Shape both operands broadcast to, or `None` if they are incompatible.
/// Standard right-aligned rules: missing axes count as 1; equal or 1 matches.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Maps linear indices in an output shape to linear indices in a (broadcast)
/// source shape.
struct BroadcastMap {
    out_shape: Vec<usize>,
    src_shape_padded: Vec<usize>,
}

impl BroadcastMap {
    fn new(out_shape: &[usize], src_shape: &[usize]) -> Self {
        let mut padded = vec![1; out_shape.len() - src_shape.len()];
        padded.extend_from_slice(src_shape);
        BroadcastMap { out_shape: out_shape.to_vec(), src_shape_padded: padded }
    }

    fn src_index(&self, mut out_index: usize) -> usize {
        let mut src = 0;
        let mut src_stride = 1;
        let mut strides = vec![0; self.out_shape.len()];
        for d in (0..self.out_shape.len()).rev() {
            strides[d] = src_stride;
            src_stride *= self.src_shape_padded[d];
        }
        for d in (0..self.out_shape.len()).rev() {
            let coord = out_index % self.out_shape[d];
            out_index /= self.out_shape[d];
            if self.src_shape_padded[d] != 1 {
                src += coord * strides[d];
            }
        }
        src
    }
}

// ── Matmul kernels ──────────────────────────────────────────────────────────

struct MatmulDims {
    out_shape: Vec<usize>,
    batch_out: Vec<usize>,
    batch_a: Vec<usize>,
    batch_b: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

impl MatmulDims {
    fn resolve(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let batch_a = sa[..sa.len() - 2].to_vec();
        let batch_b = sb[..sb.len() - 2].to_vec();
        let batch_out = broadcast_shapes(&batch_a, &batch_b).ok_or(Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let mut out_shape = batch_out.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulDims { out_shape, batch_out, batch_a, batch_b, m, k, n })
    }
}

fn matmul_kernel(dims: &MatmulDims, a: &[f64], b: &[f64], out: &mut [f64]) {
    let (m, k, n) = (dims.m, dims.k, dims.n);
    let map_a = BroadcastMap::new(&dims.batch_out, &dims.batch_a);
    let map_b = BroadcastMap::new(&dims.batch_out, &dims.batch_b);
    let cells = numel(&dims.batch_out).max(1);
    for cell in 0..cells {
        let ao = map_a.src_index(cell) * m * k;
        let bo = map_b.src_index(cell) * k * n;
        let oo = cell * m * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[ao + i * k + p] * b[bo + p * n + j];
                }
                out[oo + i * n + j] = acc;
            }
        }
    }
}

fn matmul_backward(dims: &MatmulDims, a: &[f64], b: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k, n) = (dims.m, dims.k, dims.n);
    let map_a = BroadcastMap::new(&dims.batch_out, &dims.batch_a);
    let map_b = BroadcastMap::new(&dims.batch_out, &dims.batch_b);
    let mut da = vec![0.0; numel(&dims.batch_a).max(1) * m * k];
    let mut db = vec![0.0; numel(&dims.batch_b).max(1) * k * n];
    let cells = numel(&dims.batch_out).max(1);
    for cell in 0..cells {
        let ao = map_a.src_index(cell) * m * k;
        let bo = map_b.src_index(cell) * k * n;
        let oo = cell * m * n;
        for i in 0..m {
            for p in 0..k {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += g[oo + i * n + j] * b[bo + p * n + j];
                }
                da[ao + i * k + p] += acc;
            }
        }
        for p in 0..k {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += a[ao + i * k + p] * g[oo + i * n + j];
                }
                db[bo + p * n + j] += acc;
            }
        }
    }
    (da, db)
}

// ── Tests ───────────────────────────────────────────────────────────────────
