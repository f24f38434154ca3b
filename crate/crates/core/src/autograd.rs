//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op validates shapes, computes its value eagerly and, when any input
//! needs a gradient, records a closure that maps the output gradient to input
//! gradient contributions. `backward` replays the tape in reverse.
//!
//! Leaves may borrow their tensors (`*_ref` constructors), so frozen weights
//! are never copied onto the tape.

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::Tensor;
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Read access to node values from inside a backward closure.
pub trait Values {
    fn data(&self, v: Var) -> &[f64];
}

impl Values for Vec<Node<'_>> {
    fn data(&self, v: Var) -> &[f64] {
        self[v.0].value.get().data()
    }
}

type BackwardFn<'a> = Box<dyn Fn(&dyn Values, &[f64], &mut Grads) + 'a>;

pub struct Node<'a> {
    value: Value<'a>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<BackwardFn<'a>>,
}

/// Per-pass gradient buffers, allocated lazily.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    needs: Vec<bool>,
}

impl Grads {
    /// Mutable gradient buffer for `v`, or `None` if `v` needs no gradient.
    pub fn get(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.needs[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn take(&mut self, i: usize) -> Option<Vec<f64>> {
        self.bufs[i].take()
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            leaf_grads: Vec::new(),
        }
    }

    /// A tape that never records gradients; parameters act as constants.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Value<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.record,
            leaf: true,
            backward: None,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Value::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Value::Borrowed(t), false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(Value::Owned(t), true)
    }

    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Value::Borrowed(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        match core::mem::replace(&mut self.nodes[v.0].value, Value::Owned(Tensor::zeros(&[0]))) {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t.clone(),
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&dyn Values, &[f64], &mut Grads) + 'a,
    ) -> Var {
        let requires_grad = self.any_grad(inputs);
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            leaf: false,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar. Leaf gradients add up across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let n = loss.0 + 1;
        let mut grads = Grads {
            bufs: (0..n).map(|_| None).collect(),
            lens: self.nodes[..n].iter().map(|nd| nd.value.get().len()).collect(),
            needs: self.nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
        };
        if !grads.needs[loss.0] {
            return Ok(());
        }
        grads.bufs[loss.0] = Some(vec![1.0]);
        let mut leaf_out = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads.take(i) else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                bw(&self.nodes, &g, &mut grads);
            }
            if node.leaf {
                leaf_out.push((i, g));
            }
        }
        for (i, g) in leaf_out {
            match &mut self.leaf_grads[i] {
                Some(acc) => kernels::axpy(1.0, &g, acc),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(op, s, &[])),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(value, &[a, b], move |vals, g, grads| {
            if let Some(da) = grads.get(a) {
                // da += g · bᵀ
                let bd = vals.data(b);
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] += kernels::dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(db) = grads.get(b) {
                kernels::matmul_tn_acc(vals.data(a), g, m, k, n, db);
            }
        }))
    }

    /// `x[m×k] · w[n×k]ᵀ`, the projection used by every linear layer.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.dims2(x, "linear")?;
        let (n, k2) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(x).data(), self.value(w).data(), m, k, n, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(value, &[x, w], move |vals, g, grads| {
            if let Some(dx) = grads.get(x) {
                kernels::matmul_nn_acc(g, vals.data(w), m, n, k, dx);
            }
            if let Some(dw) = grads.get(w) {
                kernels::matmul_tn_acc(g, vals.data(x), m, n, k, dw);
            }
        }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push_op(value, &[a, b], move |_, g, grads| {
            if let Some(da) = grads.get(a) {
                kernels::axpy(1.0, g, da);
            }
            if let Some(db) = grads.get(b) {
                kernels::axpy(1.0, g, db);
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push_op(value, &[a, b], move |vals, g, grads| {
            if let Some(da) = grads.get(a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(vals.data(b)) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = grads.get(b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(vals.data(a)) {
                    *d += gi * ai;
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        self.push_op(value, &[a], move |_, g, grads| {
            if let Some(da) = grads.get(a) {
                kernels::axpy(s, g, da);
            }
        })
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v / (1.0 + math::exp(-v)))
            .collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push_op(value, &[x], move |vals, g, grads| {
            if let Some(dx) = grads.get(x) {
                for ((d, gi), &v) in dx.iter_mut().zip(g).zip(vals.data(x)) {
                    let s = 1.0 / (1.0 + math::exp(-v));
                    *d += gi * s * (1.0 + v * (1.0 - s));
                }
            }
        })
    }

    /// Row-wise RMS normalization with a learned gain: `x / rms(x) * gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "rmsnorm")?;
        if self.value(gain).len() != n {
            return Err(shape_err("rmsnorm", self.shape(x), self.shape(gain)));
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let mut inv = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let ms = kernels::dot(row, row) / n as f64;
            let r = 1.0 / math::sqrt(ms + eps);
            inv[i] = r;
            for j in 0..n {
                out[i * n + j] = row[j] * r * gd[j];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let value = value.reshape(self.shape(x))?;
        Ok(self.push_op(value, &[x, gain], move |vals, g, grads| {
            let xd = vals.data(x);
            let gd = vals.data(gain);
            if let Some(dg) = grads.get(gain) {
                for i in 0..m {
                    for j in 0..n {
                        dg[j] += g[i * n + j] * xd[i * n + j] * inv[i];
                    }
                }
            }
            if let Some(dx) = grads.get(x) {
                for i in 0..m {
                    let r = inv[i];
                    let row = &xd[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    // xhat = x r, dxhat = g ⊙ gain
                    let mut proj = 0.0;
                    for j in 0..n {
                        proj += grow[j] * gd[j] * row[j] * r;
                    }
                    proj /= n as f64;
                    for j in 0..n {
                        dx[i * n + j] += r * (grow[j] * gd[j] - row[j] * r * proj);
                    }
                }
            }
        }))
    }

    /// Gathers rows of `table[V×d]`; the backward pass scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    token: id as u32,
                    vocab_size: v,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(self.push_op(value, &[table], move |_, g, grads| {
            if let Some(dt) = grads.get(table) {
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
            }
        }))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.dims2(p, "concat_rows")?.1,
            None => return Err(shape_err("concat_rows", &[], &[])),
        };
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for &p in parts {
            let (_, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", &[cols], self.shape(p)));
            }
            offsets.push(data.len());
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let value = Tensor::new(&[rows, cols], data)?;
        let parts = parts.to_vec();
        Ok(self.push_op(value, &parts.clone(), move |vals, g, grads| {
            for (&p, &off) in parts.iter().zip(&offsets) {
                let len = vals.data(p).len();
                if let Some(dp) = grads.get(p) {
                    kernels::axpy(1.0, &g[off..off + len], dp);
                }
            }
        }))
    }

    /// Rows `rows` of `x` (in the given order).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "select_rows")?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(shape_err("select_rows", self.shape(x), &[r]));
            }
            out.extend_from_slice(&xd[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(&[rows.len(), n], out)?;
        let rows = rows.to_vec();
        Ok(self.push_op(value, &[x], move |_, g, grads| {
            if let Some(dx) = grads.get(x) {
                for (i, &r) in rows.iter().enumerate() {
                    kernels::axpy(1.0, &g[i * n..(i + 1) * n], &mut dx[r * n..(r + 1) * n]);
                }
            }
        }))
    }

    /// Rotary position embedding on `x[T×(heads·head_dim)]`.
    ///
    /// Within each head, dimension `i` pairs with `i + head_dim/2` and is
    /// rotated by `position · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let (t, d) = self.dims2(x, "rope")?;
        if positions.len() != t || n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(shape_err("rope", self.shape(x), &[positions.len(), n_heads]));
        }
        let hd = d / n_heads;
        let half = hd / 2;
        let (cos, sin) = rope_tables(positions, hd, base);
        let mut out = self.value(x).data().to_vec();
        rotate(&mut out, t, n_heads, hd, &cos, &sin, 1.0);
        let value = Tensor::new(&[t, d], out)?;
        debug_assert_eq!(cos.len(), t * half);
        Ok(self.push_op(value, &[x], move |_, g, grads| {
            if let Some(dx) = grads.get(x) {
                let mut back = g.to_vec();
                rotate(&mut back, t, n_heads, hd, &cos, &sin, -1.0);
                kernels::axpy(1.0, &back, dx);
            }
        }))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[T×d]`, `k`/`v` are `[S×d]`; head `h` owns columns
    /// `h·hd..(h+1)·hd`. `allow` is row-major `[T×S]`; forbidden scores are
    /// `-inf` and receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, allow: &[bool], n_heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "attention")?;
        let (s, dk) = self.dims2(k, "attention")?;
        if dk != d || self.shape(v) != self.shape(k) || n_heads == 0 || d % n_heads != 0 {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if allow.len() != t * s {
            return Err(Error::MaskLength {
                expected: (t, s),
                found: (allow.len() / s.max(1), s),
            });
        }
        let hd = d / n_heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; n_heads * t * s];
        let mut out = vec![0.0; t * d];
        for h in 0..n_heads {
            let c0 = h * hd;
            for i in 0..t {
                let prow = &mut probs[(h * t + i) * s..(h * t + i + 1) * s];
                let qi = &qd[i * d + c0..i * d + c0 + hd];
                for j in 0..s {
                    prow[j] = if allow[i * s + j] {
                        kernels::dot(qi, &kd[j * d + c0..j * d + c0 + hd]) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                kernels::softmax_in_place(prow, i)?;
                let orow = &mut out[i * d + c0..i * d + c0 + hd];
                for j in 0..s {
                    let p = prow[j];
                    if p != 0.0 {
                        kernels::axpy(p, &vd[j * d + c0..j * d + c0 + hd], orow);
                    }
                }
            }
        }
        let value = Tensor::new(&[t, d], out)?;
        Ok(self.push_op(value, &[q, k, v], move |vals, g, grads| {
            let qd = vals.data(q);
            let kd = vals.data(k);
            let vd = vals.data(v);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; s * d];
            let mut dv = vec![0.0; s * d];
            let mut dp = vec![0.0; s];
            for h in 0..n_heads {
                let c0 = h * hd;
                for i in 0..t {
                    let prow = &probs[(h * t + i) * s..(h * t + i + 1) * s];
                    let gi = &g[i * d + c0..i * d + c0 + hd];
                    let mut inner = 0.0;
                    for j in 0..s {
                        let p = prow[j];
                        if p != 0.0 {
                            dp[j] = kernels::dot(gi, &vd[j * d + c0..j * d + c0 + hd]);
                            inner += p * dp[j];
                            kernels::axpy(p, gi, &mut dv[j * d + c0..j * d + c0 + hd]);
                        }
                    }
                    let qi = &qd[i * d + c0..i * d + c0 + hd];
                    for j in 0..s {
                        let p = prow[j];
                        if p != 0.0 {
                            let ds = p * (dp[j] - inner) * scale;
                            kernels::axpy(ds, &kd[j * d + c0..j * d + c0 + hd], &mut dq[i * d + c0..i * d + c0 + hd]);
                            kernels::axpy(ds, qi, &mut dk[j * d + c0..j * d + c0 + hd]);
                        }
                    }
                }
            }
            if let Some(g_q) = grads.get(q) {
                kernels::axpy(1.0, &dq, g_q);
            }
            if let Some(g_k) = grads.get(k) {
                kernels::axpy(1.0, &dk, g_k);
            }
            if let Some(g_v) = grads.get(v) {
                kernels::axpy(1.0, &dv, g_v);
            }
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            kernels::softmax_in_place(&mut out[i * n..(i + 1) * n], i)?;
        }
        let value = Tensor::new(self.shape(x), out)?;
        let me = Var(self.nodes.len());
        Ok(self.push_op(value, &[x], move |vals, g, grads| {
            let y = vals.data(me);
            if let Some(dx) = grads.get(x) {
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let inner = kernels::dot(yr, gr);
                    for j in 0..n {
                        dx[i * n + j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
        }))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "log_softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            kernels::log_softmax_row(&xd[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n], i)?;
        }
        let value = Tensor::new(self.shape(x), out)?;
        let me = Var(self.nodes.len());
        Ok(self.push_op(value, &[x], move |vals, g, grads| {
            let y = vals.data(me);
            if let Some(dx) = grads.get(x) {
                for i in 0..m {
                    let gsum: f64 = g[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        dx[i * n + j] += g[i * n + j] - math::exp(y[i * n + j]) * gsum;
                    }
                }
            }
        }))
    }

    /// `mean_rows Σ_i p_i (ln p_i − log_softmax(q)_i)`.
    ///
    /// `p` holds probability rows (each must sum to 1 within 1e-9); terms
    /// with `p_i = 0` contribute nothing.
    pub fn kl_divergence(&mut self, p: &Tensor, q_logits: Var) -> Result<Var> {
        let (m, n) = self.dims2(q_logits, "kl_divergence")?;
        if p.len() != m * n {
            return Err(shape_err("kl_divergence", p.shape(), self.shape(q_logits)));
        }
        let pd = p.data();
        for i in 0..m {
            let sum: f64 = pd[i * n..(i + 1) * n].iter().sum();
            if !((sum - 1.0).abs() <= 1e-9) {
                return Err(Error::Distribution { row: i, sum });
            }
        }
        let logp: Vec<f64> = pd.iter().map(|&x| if x > 0.0 { math::ln(x) } else { 0.0 }).collect();
        self.kl_core(pd.to_vec(), logp, q_logits, m, n)
    }

    /// KL divergence from teacher logits: `D(softmax(t) ‖ softmax(q))`.
    pub fn kl_divergence_logits(&mut self, teacher_logits: &Tensor, q_logits: Var) -> Result<Var> {
        let (m, n) = self.dims2(q_logits, "kl_divergence")?;
        if teacher_logits.len() != m * n {
            return Err(shape_err("kl_divergence", teacher_logits.shape(), self.shape(q_logits)));
        }
        let td = teacher_logits.data();
        let mut logp = vec![0.0; m * n];
        for i in 0..m {
            kernels::log_softmax_row(&td[i * n..(i + 1) * n], &mut logp[i * n..(i + 1) * n], i)?;
        }
        let p = logp.iter().map(|&l| math::exp(l)).collect();
        self.kl_core(p, logp, q_logits, m, n)
    }

    fn kl_core(&mut self, p: Vec<f64>, logp: Vec<f64>, q: Var, m: usize, n: usize) -> Result<Var> {
        let qd = self.value(q).data();
        let mut logq = vec![0.0; m * n];
        for i in 0..m {
            kernels::log_softmax_row(&qd[i * n..(i + 1) * n], &mut logq[i * n..(i + 1) * n], i)?;
        }
        let mut total = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in i * n..(i + 1) * n {
                if p[j] > 0.0 {
                    row += p[j] * (logp[j] - logq[j]);
                }
            }
            total += row;
        }
        let rows = m.max(1) as f64;
        let value = Tensor::scalar(if m == 0 { 0.0 } else { total / rows });
        Ok(self.push_op(value, &[q], move |_, g, grads| {
            if let Some(dq) = grads.get(q) {
                let s = g[0] / rows;
                for j in 0..m * n {
                    dq[j] += s * (math::exp(logq[j]) - p[j]);
                }
            }
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let ld = self.value(logits).data();
        let mut lsm = vec![0.0; m * n];
        let mut total = 0.0;
        for i in 0..m {
            let t = targets[i] as usize;
            if t >= n {
                return Err(Error::TokenOutOfRange {
                    token: targets[i],
                    vocab_size: n,
                });
            }
            kernels::log_softmax_row(&ld[i * n..(i + 1) * n], &mut lsm[i * n..(i + 1) * n], i)?;
            total -= lsm[i * n + t];
        }
        let rows = m.max(1) as f64;
        let value = Tensor::scalar(total / rows);
        let targets = targets.to_vec();
        Ok(self.push_op(value, &[logits], move |_, g, grads| {
            if let Some(dl) = grads.get(logits) {
                let s = g[0] / rows;
                for i in 0..m {
                    for j in 0..n {
                        dl[i * n + j] += s * math::exp(lsm[i * n + j]);
                    }
                    dl[i * n + targets[i] as usize] -= s;
                }
            }
        }))
    }

    /// Mean squared difference between `a` and a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        if self.value(a).len() != target.len() {
            return Err(shape_err("mse", self.shape(a), target.shape()));
        }
        let diff: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| x - y)
            .collect();
        let count = diff.len().max(1) as f64;
        let value = Tensor::scalar(diff.iter().map(|d| d * d).sum::<f64>() / count);
        Ok(self.push_op(value, &[a], move |_, g, grads| {
            if let Some(da) = grads.get(a) {
                kernels::axpy(2.0 * g[0] / count, &diff, da);
            }
        }))
    }

    /// `base + scale · delta` on rows where `gate` is set; other rows copy
    /// `base` bit-for-bit.
    pub fn gated_add(&mut self, base: Var, delta: Var, gate: &[bool], scale: f64) -> Result<Var> {
        self.same_shape(base, delta, "gated_add")?;
        let (m, n) = self.dims2(base, "gated_add")?;
        if gate.len() != m {
            return Err(shape_err("gated_add", self.shape(base), &[gate.len()]));
        }
        let mut out = self.value(base).data().to_vec();
        let dd = self.value(delta).data();
        for (i, &on) in gate.iter().enumerate() {
            if on {
                kernels::axpy(scale, &dd[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(self.shape(base), out)?;
        let gate = gate.to_vec();
        Ok(self.push_op(value, &[base, delta], move |_, g, grads| {
            if let Some(db) = grads.get(base) {
                kernels::axpy(1.0, g, db);
            }
            if let Some(dd) = grads.get(delta) {
                for (i, &on) in gate.iter().enumerate() {
                    if on {
                        kernels::axpy(scale, &g[i * n..(i + 1) * n], &mut dd[i * n..(i + 1) * n]);
                    }
                }
            }
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push_op(value, &[x], move |_, g, grads| {
            if let Some(dx) = grads.get(x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        })
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(shape_err("weighted_sum", self.shape(v), &[1]));
            }
            total += w * self.value(v).data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let terms = terms.to_vec();
        Ok(self.push_op(Tensor::scalar(total), &inputs, move |_, g, grads| {
            for &(v, w) in &terms {
                if let Some(dv) = grads.get(v) {
                    dv[0] += w * g[0];
                }
            }
        }))
    }
}

/// `cos`/`sin` tables of shape `[T × head_dim/2]`.
pub fn rope_tables(positions: &[usize], head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| 1.0 / math::powf(base, (2 * i) as f64 / head_dim as f64))
        .collect();
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for &f in &inv_freq {
            let angle = p as f64 * f;
            cos.push(math::cos(angle));
            sin.push(math::sin(angle));
        }
    }
    (cos, sin)
}

fn rotate(x: &mut [f64], t: usize, n_heads: usize, hd: usize, cos: &[f64], sin: &[f64], dir: f64) {
    let half = hd / 2;
    let d = n_heads * hd;
    for r in 0..t {
        for h in 0..n_heads {
            let base = r * d + h * hd;
            for i in 0..half {
                let c = cos[r * half + i];
                let s = dir * sin[r * half + i];
                let a = x[base + i];
                let b = x[base + i + half];
                x[base + i] = a * c - b * s;
                x[base + i + half] = a * s + b * c;
            }
        }
    }
}
