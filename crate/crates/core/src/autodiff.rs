//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every differentiable call appends a node holding its forward value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes once in reverse
//! and accumulates adjoints into the leaves created with [`Tape::param`].
//! Leaves created with [`Tape::constant`] are frozen: they never get a
//! gradient buffer, and no adjoint work is done for subgraphs that only
//! depend on frozen values.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, MatRef};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Outcome of a masked cross-entropy call.
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of positions whose target was not the ignore id.
    pub supervised: usize,
}

impl CrossEntropy {
    /// Set when every position was ignored; the loss is then defined as zero.
    pub fn all_ignored(&self) -> bool {
        self.supervised == 0
    }
}

enum Op<E: Element> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, E),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<E>,
        count: usize,
    },
    Sum(Var),
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Frozen leaf: participates in the forward pass, never receives a gradient.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf, `None` for frozen tensors or
    /// leaves no backward pass has reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, k) = va.dims2()?;
        let (k2, n) = vb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![E::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::row_major(va.data(), k),
            MatRef::row_major(vb.data(), n),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, k) = va.dims2()?;
        let (n, k2) = vb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", va.shape(), vb.shape()));
        }
        let mut out = vec![E::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::row_major(va.data(), k),
            MatRef::transposed(vb.data(), k),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    /// Whether `b` is same-shape with `a` (false) or a trailing-dimension
    /// broadcast of it (true). Anything else is rejected.
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(false)
        } else if !sa.is_empty() && sb == &sa[1..] {
            Ok(true)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let w = vb.len();
        let mut out = va.data().to_vec();
        if w > 0 {
            for row in out.chunks_mut(w) {
                kernels::axpy(row, vb);
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b, broadcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let w = vb.len();
        let mut out = va.data().to_vec();
        if w > 0 {
            for row in out.chunks_mut(w) {
                for (x, &y) in row.iter_mut().zip(vb) {
                    *x = *x * y;
                }
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| if v > E::zero() { v } else { E::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (rows, n) = vx.dims2()?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", vx.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let eps = E::of(eps);
        let nf = E::of(n as f64);
        let mut out = vec![E::zero(); rows * n];
        let mut xhat = vec![E::zero(); rows * n];
        let mut rstd = vec![E::zero(); rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<E>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + bta[j];
            }
        }
        let t = Tensor::from_parts(vec![rows, n], out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
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

    /// Selects rows of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (v, d) = vt.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!(
                    "gather index {id} out of range for table with {v} rows"
                )));
            }
            out.extend_from_slice(vt.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the time (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, d) = self.value(*first).dims2()?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            let (r, c) = vp.dims2()?;
            if c != d {
                return Err(Error::shape("concat_rows", self.shape(*first), vp.shape()));
            }
            rows += r;
            out.extend_from_slice(vp.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::from_parts(vec![rows, d], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(*first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        if start + len > r {
            return Err(Error::shape("slice_rows", vx.shape(), &[start + len, c]));
        }
        let t = Tensor::from_parts(
            vec![len, c],
            vx.data()[start * c..(start + len) * c].to_vec(),
        );
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2()?;
        if start + len > c {
            return Err(Error::shape("slice_cols", vx.shape(), &[r, start + len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&vx.row(i)[start..start + len]);
        }
        let t = Tensor::from_parts(vec![r, len], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row-wise softmax of `x + mask`; `mask` is an additive constant
    /// (use `-inf` to exclude entries). Fully masked rows come out as zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<E>>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, n) = vx.dims2()?;
        if let Some(m) = mask {
            if m.shape() != vx.shape() {
                return Err(Error::shape("softmax_rows", vx.shape(), m.shape()));
            }
        }
        let mut out = vec![E::zero(); rows * n];
        let mut buf = vec![E::zero(); n];
        for r in 0..rows {
            let row = vx.row(r);
            match mask {
                Some(m) => {
                    for ((b, &a), &mm) in buf.iter_mut().zip(row).zip(m.row(r)) {
                        *b = a + mm;
                    }
                }
                None => buf.copy_from_slice(row),
            }
            let max = buf.iter().copied().fold(E::neg_infinity(), E::max);
            if max == E::neg_infinity() {
                continue;
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut s = E::zero();
            for (o, &b) in dst.iter_mut().zip(&buf) {
                *o = (b - max).exp();
                s = s + *o;
            }
            for o in dst.iter_mut() {
                *o = *o / s;
            }
        }
        let t = Tensor::from_parts(vec![rows, n], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    /// Mean negative log-softmax over positions whose target is not `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: usize,
    ) -> Result<CrossEntropy> {
        let vl = self.value(logits);
        let (t, v) = vl.dims2()?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = vec![E::zero(); t * v];
        let mut total = E::zero();
        let mut count = 0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt == ignore {
                continue;
            }
            if tgt >= v {
                return Err(Error::Contract(format!(
                    "target id {tgt} at position {r} outside vocabulary of {v}"
                )));
            }
            let row = vl.row(r);
            let lse = kernels::log_sum_exp(row);
            total = total + (lse - row[tgt]);
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 {
            E::zero()
        } else {
            total / E::of(count as f64)
        };
        let rg = self.rg(logits);
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        );
        Ok(CrossEntropy {
            loss: var,
            supervised: count,
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Accumulates d`loss`/d`leaf` into every reachable trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut adj: Vec<Option<Vec<E>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => kernels::axpy(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<E>>], v: Var, f: impl FnOnce(&mut [E])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut adj[v.0];
        let buf = slot.get_or_insert_with(|| vec![E::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[E], adj: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.accumulate(adj, *a, |da| {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g, n),
                        MatRef::transposed(vb.data(), n),
                        da,
                        true,
                    )
                });
                self.accumulate(adj, *b, |db| {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(va.data(), k),
                        MatRef::row_major(g, n),
                        db,
                        true,
                    )
                });
            }
            Op::MatMulNt(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                self.accumulate(adj, *a, |da| {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g, n),
                        MatRef::row_major(vb.data(), k),
                        da,
                        true,
                    )
                });
                self.accumulate(adj, *b, |db| {
                    kernels::gemm(
                        n,
                        m,
                        k,
                        MatRef::transposed(g, n),
                        MatRef::row_major(va.data(), k),
                        db,
                        true,
                    )
                });
            }
            Op::Add { a, b, broadcast } => {
                self.accumulate(adj, *a, |da| kernels::axpy(da, g));
                self.accumulate(adj, *b, |db| {
                    if *broadcast {
                        for row in g.chunks(db.len().max(1)) {
                            kernels::axpy(db, row);
                        }
                    } else {
                        kernels::axpy(db, g)
                    }
                });
            }
            Op::Mul { a, b, broadcast } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let w = vb.len().max(1);
                self.accumulate(adj, *a, |da| {
                    for (r, (dr, gr)) in da.chunks_mut(w).zip(g.chunks(w)).enumerate() {
                        let br = if *broadcast {
                            vb
                        } else {
                            &vb[r * w..(r + 1) * w]
                        };
                        for ((d, &gg), &bb) in dr.iter_mut().zip(gr).zip(br) {
                            *d = *d + gg * bb;
                        }
                    }
                });
                self.accumulate(adj, *b, |db| {
                    for (r, (gr, ar)) in g.chunks(w).zip(va.chunks(w)).enumerate() {
                        let dr: &mut [E] = if *broadcast {
                            &mut db[..]
                        } else {
                            &mut db[r * w..(r + 1) * w]
                        };
                        for ((d, &gg), &aa) in dr.iter_mut().zip(gr).zip(ar) {
                            *d = *d + gg * aa;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(adj, *x, |dx| {
                    for (d, &gg) in dx.iter_mut().zip(g) {
                        *d = *d + gg * *c;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(adj, *x, |dx| {
                    for ((d, &gg), &xx) in dx.iter_mut().zip(g).zip(vx) {
                        if xx > E::zero() {
                            *d = *d + gg;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                self.accumulate(adj, *gamma, |dg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &gg), &h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d = *d + gg * h;
                        }
                    }
                });
                self.accumulate(adj, *beta, |db| {
                    for gr in g.chunks(n) {
                        kernels::axpy(db, gr);
                    }
                });
                self.accumulate(adj, *x, |dx| {
                    let nf = E::of(n as f64);
                    let mut dxh = vec![E::zero(); n];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_d = E::zero();
                        let mut mean_dh = E::zero();
                        for j in 0..n {
                            dxh[j] = gr[j] * gam[j];
                            mean_d = mean_d + dxh[j];
                            mean_dh = mean_dh + dxh[j] * hr[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            dr[j] = dr[j] + rstd[r] * (dxh[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.accumulate(adj, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(adj, p, |dp| kernels::axpy(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(adj, p, |dp| {
                        for (dr, gr) in dp.chunks_mut(w.max(1)).zip(g.chunks(total)) {
                            kernels::axpy(dr, &gr[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).shape()[1];
                self.accumulate(adj, *x, |dx| {
                    kernels::axpy(&mut dx[start * c..start * c + g.len()], g)
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let w = node.value.shape()[1];
                self.accumulate(adj, *x, |dx| {
                    if w == 0 {
                        return;
                    }
                    for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(w)) {
                        kernels::axpy(&mut dr[*start..start + w], gr);
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(adj, *x, |dx| kernels::axpy(dx, g)),
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                self.accumulate(adj, *x, |dx| {
                    if n == 0 {
                        return;
                    }
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yy * (gg - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.value(*logits).shape()[1];
                let scale = g[0] / E::of(*count as f64);
                self.accumulate(adj, *logits, |dl| {
                    for (r, &tgt) in targets.iter().enumerate() {
                        if tgt == *ignore {
                            continue;
                        }
                        let dr = &mut dl[r * v..(r + 1) * v];
                        for (d, &p) in dr.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d = *d + scale * p;
                        }
                        dr[tgt] = dr[tgt] - scale;
                    }
                });
            }
            Op::Sum(x) => {
                let u = g[0];
                self.accumulate(adj, *x, |dx| dx.iter_mut().for_each(|d| *d = *d + u));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn relu_forward_and_zero_grad_on_negative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[-1.0, -2.0, -0.5]).unwrap());
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn sum_backward_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn frozen_leaves_get_no_buffer() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let x = tape.param(t(&[vec![1.0, 1.0]]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        let ce = tape.cross_entropy(l, &[2], usize::MAX).unwrap();
        assert!((tape.value(ce.loss).item() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(ce.supervised, 1);
    }

    #[test]
    fn cross_entropy_all_ignored_is_flagged_zero() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::ones(&[3, 4]));
        let ce = tape.cross_entropy(l, &[9, 9, 9], 9).unwrap();
        assert!(ce.all_ignored());
        assert_eq!(tape.value(ce.loss).item(), 0.0);
        tape.backward(ce.loss).unwrap();
        assert!(tape.grad(l).is_none());
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab_target() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(tape.cross_entropy(l, &[4], usize::MAX).is_err());
    }

    #[test]
    fn broadcast_beyond_bias_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_ok());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = Tensor::from_f64(&[2, 2], &[0.0, f64::NEG_INFINITY, 0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.5, 0.5]);
    }
}
