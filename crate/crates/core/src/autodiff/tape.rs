use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::kernels;
use super::{DiffArray, Mask, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var, alpha: f32 },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Softmax { x: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node {
    value: DiffArray,
    op: Op,
}

/// Records a forward computation so it can be differentiated.
///
/// A tape borrows the [`ParamStore`] it reads parameters from; each parameter
/// is copied onto the tape once, on first use.
#[derive(Debug)]
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Tape<'static> {
    /// A tape with no parameter store, for pure array computations.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            grad_enabled: true,
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// Inference tape: values only, nothing requires a gradient.
    pub fn no_grad(store: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars at or past
    /// `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.param_vars.retain(|_, v| v.0 < len);
    }

    fn push(&mut self, value: DiffArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<f32>, inputs: &[Var], op: Op) -> Var {
        let needs = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let mut value = DiffArray::new(shape, data).expect("op produced inconsistent shape");
        value.requires_grad = needs;
        self.push(value, op)
    }

    /// Adds an input array. It participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, mut value: DiffArray) -> Var {
        value.requires_grad &= self.grad_enabled;
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    /// Adds a constant (never differentiated).
    pub fn constant(&mut self, mut value: DiffArray) -> Var {
        value.requires_grad = false;
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store.expect("tape has no parameter store");
        let mut value = store.get(id).value.clone();
        value.clear_grad();
        value.requires_grad = self.grad_enabled;
        let v = self.push(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradients of every parameter used on this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f32>)> {
        self.param_vars
            .iter()
            .filter_map(|(id, v)| self.grad(*v).map(|g| (*id, g.to_vec())))
            .collect()
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` over the last two axes, where `op` transposes when the
    /// flag is set. Leading (batch) axes broadcast.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let dims = MatDims::new(self.shape(a), self.shape(b), ta, tb)?;
        let mut out = vec![0.0f32; dims.out_len()];
        {
            let av = self.data(a);
            let bv = self.data(b);
            for (i, (ao, bo)) in dims.offsets.iter().enumerate() {
                gemm(
                    dims.m, dims.k, dims.n, 1.0,
                    av, *ao, dims.rsa, dims.csa,
                    bv, *bo, dims.rsb, dims.csb,
                    0.0,
                    &mut out, i * dims.m * dims.n, dims.n as isize, 1,
                );
            }
        }
        let shape = dims.out_shape();
        Ok(self.push_op(&shape, out, &[a, b], Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if tiles(self.shape(a), self.shape(b)) {
            self.add_scaled(a, b, 1.0)
        } else {
            self.add_scaled(b, a, 1.0)
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, -1.0)
    }

    /// `a + alpha * b`, with `b` tiled over `a` when its shape is a suffix of `a`'s.
    fn add_scaled(&mut self, a: Var, b: Var, alpha: f32) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !tiles(sa, sb) {
            return Err(shape_err("add", format!("{:?} and {:?} do not broadcast", sa, sb)));
        }
        let shape = sa.to_vec();
        let (av, bv) = (self.data(a), self.data(b));
        let nb = bv.len();
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(nb) {
            chunk.iter_mut().zip(bv).for_each(|(o, y)| *o += alpha * *y);
        }
        Ok(self.push_op(&shape, out, &[a, b], Op::Add { a, b, alpha }))
    }

    /// Elementwise product, with `b` tiled over `a` when its shape is a suffix.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if tiles(self.shape(a), self.shape(b)) { (a, b) } else { (b, a) };
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !tiles(sa, sb) {
            return Err(shape_err("mul", format!("{:?} and {:?} do not broadcast", sa, sb)));
        }
        let shape = sa.to_vec();
        let (av, bv) = (self.data(a), self.data(b));
        let nb = bv.len();
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(nb) {
            chunk.iter_mut().zip(bv).for_each(|(o, y)| *o *= *y);
        }
        Ok(self.push_op(&shape, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|x| x * s).collect();
        self.push_op(&shape, out, &[a], Op::Scale { a, s })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        self.push_op(&shape, out, &[a], Op::Gelu { a })
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("width {} vs gain {:?} bias {:?}", d, self.shape(gain), self.shape(bias)),
            ));
        }
        let shape = self.shape(x).to_vec();
        let xv = self.data(x);
        let (gv, bv) = (self.data(gain), self.data(bias));
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push_op(&shape, out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis. Disallowed positions are exactly zero; a
    /// row with no allowed position is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let qrows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if let Some(m) = mask {
            if m.cols() != cols || (m.rows() != 1 && m.rows() != qrows) {
                return Err(shape_err(
                    "masked_softmax",
                    format!("mask {}x{} vs logits {:?}", m.rows(), m.cols(), shape),
                ));
            }
        }
        let xv = self.data(x);
        let mut out = vec![0.0f32; xv.len()];
        for (r, (row, orow)) in xv.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let allowed = mask.map(|m| if m.rows() == 1 { m.row_slice(0) } else { m.row_slice(r % qrows) });
            softmax_row(row, allowed, orow).ok_or(Error::FullyMaskedRow { row: r })?;
        }
        Ok(self.push_op(&shape, out, &[x], Op::Softmax { x }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let out = self.data(a).to_vec();
        Ok(self.push_op(shape, out, &[a], Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let rank = src_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || core::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {:?} for rank {}", axes, rank)));
        }
        let shape: Vec<usize> = axes.iter().map(|&x| src_shape[x]).collect();
        let map = permute_map(&src_shape, axes);
        let av = self.data(a);
        let out = map.iter().map(|&i| av[i]).collect();
        Ok(self.push_op(&shape, out, &[a], Op::Permute { a, axes: axes.to_vec() }))
    }

    /// Concatenates along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs trailing {:?}", s, tail)));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        Ok(self.push_op(&shape, out, parts, Op::Concat { parts: parts.to_vec() }))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(shape_err("slice_rows", format!("{}..{} of {:?}", start, start + len, s)));
        }
        let w: usize = s[1..].iter().product();
        let out = self.data(a)[start * w..(start + len) * w].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push_op(&shape, out, &[a], Op::Slice { a, start }))
    }

    /// Selects rows of `table` (axis 0) by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        let w: usize = s[1..].iter().product();
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(shape_err("gather_rows", format!("row {} of {:?}", bad, s)));
        }
        let tv = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        let mut shape = s;
        shape[0] = ids.len();
        Ok(self.push_op(&shape, out, &[table], Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits` (`[rows, vocab]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", s, targets.len()),
            ));
        }
        let v = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::OutOfVocab { id: t as u32, vocab: v });
        }
        let lv = self.data(logits);
        let mut probs = vec![0.0f32; lv.len()];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let p = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                sum += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= sum);
            total += (max + sum.ln() - row[t]) as f64;
        }
        let loss = (total / targets.len() as f64) as f32;
        Ok(self.push_op(&[1], vec![loss], &[logits], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|&x| x as f64).sum::<f64>() as f32;
        self.push_op(&[1], vec![s], &[a], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = (self.data(a).iter().map(|&x| x as f64).sum::<f64>() / n) as f32;
        self.push_op(&[1], vec![s], &[a], Op::Mean { a })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        if !self.value(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else { continue };
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Takes (or allocates) the gradient buffer of `v` so it can be written
    /// while other node values are borrowed.
    fn take_buf(&mut self, v: Var) -> Vec<f32> {
        let n = self.nodes[v.0].value.len();
        self.nodes[v.0].value.take_grad().unwrap_or_else(|| vec![0.0; n])
    }

    fn put_buf(&mut self, v: Var, g: Vec<f32>) {
        self.nodes[v.0].value.set_grad(g);
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&Self, &mut [f32])) {
        if !self.needs(v) {
            return;
        }
        let mut buf = self.take_buf(v);
        f(self, &mut buf);
        self.put_buf(v, buf);
    }

    fn backprop(&mut self, out: usize, op: &Op, g: &[f32]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let dims = MatDims::new(self.shape(*a), self.shape(*b), *ta, *tb)
                    .expect("shapes validated in forward");
                let mn = dims.m * dims.n;
                self.accumulate(*a, |t, ga| {
                    let bv = t.data(*b);
                    for (i, (ao, bo)) in dims.offsets.iter().enumerate() {
                        // d op(A) = dC · op(B)^T
                        gemm(
                            dims.m, dims.n, dims.k, 1.0,
                            g, i * mn, dims.n as isize, 1,
                            bv, *bo, dims.csb, dims.rsb,
                            1.0,
                            ga, *ao, dims.rsa, dims.csa,
                        );
                    }
                });
                self.accumulate(*b, |t, gb| {
                    let av = t.data(*a);
                    for (i, (ao, bo)) in dims.offsets.iter().enumerate() {
                        // d op(B) = op(A)^T · dC
                        gemm(
                            dims.k, dims.m, dims.n, 1.0,
                            av, *ao, dims.csa, dims.rsa,
                            g, i * mn, dims.n as isize, 1,
                            1.0,
                            gb, *bo, dims.rsb, dims.csb,
                        );
                    }
                });
            }
            Op::Add { a, b, alpha } => {
                self.accumulate(*a, |_, ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                self.accumulate(*b, |_, gb| {
                    let nb = gb.len();
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += *alpha * *y);
                    }
                });
            }
            Op::Mul { a, b } => {
                self.accumulate(*a, |t, ga| {
                    let bv = t.data(*b);
                    let nb = bv.len();
                    for (gc, ac) in g.chunks(nb).zip(ga.chunks_mut(nb)) {
                        for j in 0..nb {
                            ac[j] += gc[j] * bv[j];
                        }
                    }
                });
                self.accumulate(*b, |t, gb| {
                    let av = t.data(*a);
                    let nb = gb.len();
                    for (gc, xc) in g.chunks(nb).zip(av.chunks(nb)) {
                        for j in 0..nb {
                            gb[j] += gc[j] * xc[j];
                        }
                    }
                });
            }
            Op::Scale { a, s } => {
                self.accumulate(*a, |_, ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *s * *y));
            }
            Op::Gelu { a } => {
                self.accumulate(*a, |t, ga| {
                    let av = t.data(*a);
                    for ((x, y), &xv) in ga.iter_mut().zip(g).zip(av) {
                        *x += *y * gelu_grad(xv);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*x).last_dim();
                let rows = inv_std.len();
                self.accumulate(*gain, |_, gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(*bias, |_, gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                self.accumulate(*x, |t, gx| {
                    let gv = t.data(*gain);
                    let mut dh = vec![0.0f32; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..d {
                            dh[j] = g[r * d + j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * xh[j];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let cols = self.nodes[out].value.last_dim();
                let y = self.nodes[out].value.data().to_vec();
                self.accumulate(*x, |_, gx| {
                    for ((yr, gr), xr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot = kernels::dot(yr, gr);
                        for j in 0..cols {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(*a, |_, ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
            }
            Op::Permute { a, axes } => {
                let src_shape = self.shape(*a).to_vec();
                let map = permute_map(&src_shape, axes);
                self.accumulate(*a, |_, ga| {
                    for (o, &i) in map.iter().enumerate() {
                        ga[i] += g[o];
                    }
                });
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let piece = &g[off..off + n];
                    self.accumulate(*p, |_, gp| gp.iter_mut().zip(piece).for_each(|(x, y)| *x += *y));
                    off += n;
                }
            }
            Op::Slice { a, start } => {
                let n = g.len();
                let w = {
                    let s = self.shape(*a);
                    s[1..].iter().product::<usize>()
                };
                let off = start * w;
                self.accumulate(*a, |_, ga| {
                    ga[off..off + n].iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                });
            }
            Op::Gather { table, ids } => {
                let w = self.value(*table).len() / self.shape(*table)[0].max(1);
                self.accumulate(*table, |_, gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        gt[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(x, y)| *x += *y);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f32;
                self.accumulate(*logits, |_, gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - ind);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(*a, |_, ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let n = self.value(*a).len().max(1) as f32;
                self.accumulate(*a, |_, ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
        }
    }
}

/// True when `small` is a suffix of `big` (so it tiles over it).
fn tiles(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + kernels::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = kernels::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Writes a (masked) softmax of `row` into `out`. Returns `None` when no
/// position is allowed.
fn softmax_row(row: &[f32], allowed: Option<&[bool]>, out: &mut [f32]) -> Option<()> {
    match allowed {
        None => {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for (o, &x) in out.iter_mut().zip(row) {
                *o = kernels::exp(x - max);
            }
            let inv = 1.0 / kernels::sum(out);
            out.iter_mut().for_each(|o| *o *= inv);
        }
        Some(mask) => {
            let mut max = f32::NEG_INFINITY;
            let mut any = false;
            for (&x, &m) in row.iter().zip(mask) {
                if m {
                    any = true;
                    max = max.max(x);
                }
            }
            if !any {
                return None;
            }
            for ((o, &x), &m) in out.iter_mut().zip(row).zip(mask) {
                let e = kernels::exp(x - max);
                *o = if m { e } else { 0.0 };
            }
            let inv = 1.0 / kernels::sum(out);
            out.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Some(())
}

/// For each output linear index of the permuted array, the source linear index.
fn permute_map(src_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = src_shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&x| src_shape[x]).collect();
    let strides: Vec<usize> = axes.iter().map(|&x| src_strides[x]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// Geometry of a (batched, possibly transposed) matrix product.
struct MatDims {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
    /// (a offset, b offset) per output batch entry.
    offsets: Vec<(usize, usize)>,
}

impl MatDims {
    fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-D: {:?} x {:?}", sa, sb)));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, ka, rsa, csa) = if ta { (ca, ra, 1, ca as isize) } else { (ra, ca, ca as isize, 1) };
        let (kb, n, rsb, csb) = if tb { (cb, rb, 1, cb as isize) } else { (rb, cb, cb as isize, 1) };
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: {:?}{} x {:?}{} ({} vs {})", sa, if ta { "^T" } else { "" }, sb, if tb { "^T" } else { "" }, ka, kb),
            ));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for d in 0..rank {
            let e = match (pa[d], pb[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(shape_err("matmul", format!("batch extents {:?} and {:?} do not broadcast", ba, bb)));
                }
            };
            batch.push(e);
        }
        let stride_of = |p: &[usize]| -> Vec<usize> {
            let mut s = vec![0usize; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                s[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            s
        };
        let (sta, stb) = (stride_of(&pa), stride_of(&pb));
        let total: usize = batch.iter().product();
        let mut offsets = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let ia: usize = (0..rank).map(|d| idx[d] * sta[d]).sum();
            let ib: usize = (0..rank).map(|d| idx[d] * stb[d]).sum();
            offsets.push((ia * ra * ca, ib * rb * cb));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self { batch, m, k: ka, n, rsa, csa, rsb, csb, offsets })
    }

    fn out_len(&self) -> usize {
        self.offsets.len() * self.m * self.n
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }
}

/// Bounds-checked strided sgemm: `c = alpha * a·b + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize, alpha: f32,
    a: &[f32], a_off: usize, rsa: isize, csa: isize,
    b: &[f32], b_off: usize, rsb: isize, csb: isize,
    beta: f32,
    c: &mut [f32], c_off: usize, rsc: isize, csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize
    };
    assert!(c_off + extent(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[c_off + i * rsc as usize + j * csc as usize] = 0.0;
                }
            }
        }
        return;
    }
    assert!(a_off + extent(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
    assert!(b_off + extent(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    // SAFETY: every index touched lies inside the slices per the asserts above,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr().add(a_off), rsa, csa,
            b.as_ptr().add(b_off), rsb, csb,
            beta,
            c.as_mut_ptr().add(c_off), rsc, csc,
        );
    }
}
