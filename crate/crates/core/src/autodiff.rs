//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution order
//! (which is a topological order) and borrows the [`ParamStore`] it reads
//! parameters from. [`Graph::backward`] replays the record in reverse, visiting
//! each node once, and returns a dense [`GradientMap`] over the whole store.
//!
//! A graph and its nodes belong to one thread; several graphs over the same
//! store can run in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
    },
    Dropout(Var, Vec<Float>),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        smoothing: Float,
        probs: Vec<Float>,
        count: usize,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    grads: Vec<Tensor>,
}

impl GradientMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradientMap {
            grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Gradients given directly, one tensor per parameter in store order.
    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        GradientMap { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// Element-wise accumulation of another map over the same store.
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::ExtentMismatch {
                what: "gradient map",
                expected: self.grads.len(),
                found: other.grads.len(),
            });
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            add_into(dst.data_mut(), src.data());
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: Float) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> Float {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<Float>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: Float) -> Float {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Recorded computation for one forward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Graph in inference mode: dropout is the identity.
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            rng: None,
        }
    }

    /// Graph in training mode with its own seeded dropout stream.
    pub fn training(store: &'p ParamStore, seed: u64) -> Self {
        let mut g = Self::new(store);
        g.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    pub fn mode(&self) -> Mode {
        if self.rng.is_some() {
            Mode::Train
        } else {
            Mode::Infer
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf reading a store parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Leaf holding a fixed tensor; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul")?;
        let (k2, n) = self.value(b).matrix_dims("matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for a [m×k] and b [n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul_nt")?;
        let (n, k2) = self.value(b).matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let mut out = self.value(a).clone();
        add_into(out.data_mut(), self.value(b).data());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-n vector to every row of an [m×n] matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).matrix_dims("add_row")?;
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_row", a, bias));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            add_into(row, b);
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: Float) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.value(a).matrix_dims("softmax_rows")?;
        let out = softmax_rows(self.value(a));
        let ng = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Per-row `(x − mean) / sqrt(var + eps) · gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Float) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (m, d) = self.value(x).matrix_dims("layer_norm")?;
        if self.value(gain).len() != d {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<Float>() / d as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / d as Float;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout: identity in inference mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: Float) -> Result<Var> {
        check_drop_prob(p)?;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let n = match &self.nodes[x.0].value {
            Value::Owned(t) => t.len(),
            Value::Param(id) => self.store.get(*id).len(),
        };
        let mask = dropout_mask(n, p, rng);
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng))
    }

    /// Row lookup: output row i is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).matrix_dims("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows: empty id list"));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, size: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather(table, ids.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols: no inputs"));
        };
        let (m, _) = self.value(first).matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims("concat_cols")?;
            if r != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[i * total + off..i * total + off + w].copy_from_slice(self.value(p).row(i));
                off += w;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<Float>();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean over non-PAD rows of `(1−ε)·NLL(target) + ε·mean NLL over the
    /// vocabulary`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
        smoothing: Float,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let (m, v) = self.value(logits).matrix_dims("cross_entropy")?;
        if targets.len() != m {
            return Err(Error::ExtentMismatch {
                what: "cross_entropy targets",
                expected: m,
                found: targets.len(),
            });
        }
        let probs = softmax_rows(self.value(logits)).into_data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, size: v });
            }
            let row = self.value(logits).row(i);
            let lse = log_sum_exp(row);
            let nll_t = lse - row[t];
            let nll_mean = lse - row.iter().sum::<Float>() / v as Float;
            total += (1.0 - smoothing) * nll_t + smoothing * nll_mean;
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every target is PAD"));
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / count as Float),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                smoothing,
                probs,
                count,
            },
            ng,
        ))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Gradients of a scalar `loss` with respect to every store parameter.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = GradientMap::zeros_like(self.store);
        let mut grads: Vec<Option<Vec<Float>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        add_into(out.grads[id.index()].data_mut(), &dy);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims(self.value(*a));
                    let n = self.value(*b).cols();
                    if self.needs(*a) {
                        let da = mm_nt(&dy, self.value(*b).data(), m, n, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = mm_tn(self.value(*a).data(), &dy, m, k, n);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = dims(self.value(*a));
                    let n = self.value(*b).rows();
                    if self.needs(*a) {
                        let da = mm(&dy, self.value(*b).data(), m, n, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = mm_tn(&dy, self.value(*a).data(), m, n, k);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        let n = self.value(*bias).len();
                        let mut db = vec![0.0; n];
                        for row in dy.chunks(n) {
                            add_into(&mut db, row);
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = dy.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = dy.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, s) => {
                    let da = dy.iter().map(|g| g * s).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = dy
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let n = y.cols();
                    let mut da = vec![0.0; dy.len()];
                    for ((drow, yrow), out_row) in
                        dy.chunks(n).zip(y.data().chunks(n)).zip(da.chunks_mut(n))
                    {
                        let dot: Float = drow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                        for j in 0..n {
                            out_row[j] = yrow[j] * (drow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = self.value(*gain).len();
                    let gv = self.value(*gain).data();
                    if self.needs(*gain) {
                        let mut dg = vec![0.0; d];
                        for (drow, hrow) in dy.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += drow[j] * hrow[j];
                            }
                        }
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.needs(*bias) {
                        let mut db = vec![0.0; d];
                        for drow in dy.chunks(d) {
                            add_into(&mut db, drow);
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; dy.len()];
                        for (i, (drow, hrow)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let dh: Vec<Float> = (0..d).map(|j| drow[j] * gv[j]).collect();
                            let mean_dh = dh.iter().sum::<Float>() / d as Float;
                            let mean_dh_h =
                                dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<Float>() / d as Float;
                            for j in 0..d {
                                dx[i * d + j] = inv_std[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Dropout(a, mask) => {
                    let da = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut dt = vec![0.0; t.len()];
                    for (row, &id) in dy.chunks(d).zip(ids) {
                        add_into(&mut dt[id * d..(id + 1) * d], row);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatCols(parts) => {
                    let total = self.value(Var(idx)).cols();
                    let m = dy.len() / total;
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(m * w);
                            for i in 0..m {
                                dp.extend_from_slice(&dy[i * total + off..i * total + off + w]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        off += w;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![dy[0]; n]);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    pad_id,
                    smoothing,
                    probs,
                    count,
                } => {
                    let v = self.value(*logits).cols();
                    let scale = dy[0] / *count as Float;
                    let uniform = smoothing / v as Float;
                    let mut dl = vec![0.0; probs.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        for j in 0..v {
                            let mut q = uniform;
                            if j == t {
                                q += 1.0 - smoothing;
                            }
                            dl[i * v + j] = (probs[i * v + j] - q) * scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(out)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn accumulate(grads: &mut [Option<Vec<Float>>], v: Var, g: Vec<Float>) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// [m×k] · [k×n]
fn mm(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// [m×k] · [n×k]ᵀ
fn mm_nt(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// [m×k]ᵀ · [m×n] → [k×n]
fn mm_tn(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn log_sum_exp(row: &[Float]) -> Float {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<Float>().ln()
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Plain matrix product, outside of any graph.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Tensor::new(vec![m, n], mm(a.data(), b.data(), m, k, n))
}

fn check_drop_prob(p: Float) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, p: Float, rng: &mut R) -> Vec<Float> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<Float>() < p { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout on a plain tensor.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: Float, mode: Mode, rng: &mut R) -> Result<Tensor> {
    check_drop_prob(p)?;
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng);
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok(out)
}
