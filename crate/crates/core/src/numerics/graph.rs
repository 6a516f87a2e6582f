//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; nodes can only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::kernels::{self, RMS_NORM_EPS};
use super::{Array, NumericsError, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    MatMul { a: Var, w: Var, transpose_w: bool },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Scale { x: Var, factor: T },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, n_valid: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    params: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any trainable node, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&Array<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient per named parameter; parameters the loss does not depend on
    /// map to zeros of their own shape.
    pub fn params(&self) -> &BTreeMap<String, Array<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Array<T>> {
        self.params
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input (masks, fixed data).
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable anonymous input.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable named parameter; its gradient is reported by name.
    pub fn param(&mut self, name: &str, value: Array<T>) -> Var {
        self.push(value, Op::Param(name.to_string()), true)
    }

    /// `a @ w` where `a` is `[.., K]` (leading axes flattened) and `w` is
    /// `[K, N]`, or `[N, K]` when `transpose_w`.
    pub fn matmul(&mut self, a: Var, w: Var, transpose_w: bool) -> Result<Var, NumericsError> {
        let (ash, wsh) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if ash.is_empty() || wsh.len() != 2 {
            return Err(shape_err("matmul", format!("{ash:?} x {wsh:?}")));
        }
        let (kw, n) = if transpose_w { (wsh[1], wsh[0]) } else { (wsh[0], wsh[1]) };
        let k = *ash.last().unwrap();
        if k != kw {
            return Err(shape_err("matmul", format!("{ash:?} x {wsh:?}")));
        }
        let m = if k == 0 { 0 } else { self.value(a).len() / k };
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Array::zeros(&out_shape);
        kernels::matmul(
            self.value(a).data(),
            self.value(w).data(),
            out.data_mut(),
            m,
            k,
            n,
            false,
            transpose_w,
            false,
        );
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(out, Op::MatMul { a, w, transpose_w }, ng))
    }

    /// Batched `[B, M, K] @ [B, K, N]` (or `[B, N, K]` when `transpose_b`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumericsError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(shape_err("bmm", format!("{ash:?} x {bsh:?}")));
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let (kb, n) = if transpose_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if k != kb {
            return Err(shape_err("bmm", format!("{ash:?} x {bsh:?}")));
        }
        let mut out = Array::zeros(&[batch, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..batch {
                kernels::matmul(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut od[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    transpose_b,
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }, ng))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize, NumericsError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(shape_err(op, format!("{ash:?} with {bsh:?}")));
        }
        Ok(self.value(b).len())
    }

    /// Elementwise `a + b`; `b` may omit leading axes of `a` (broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let bl = self.check_suffix("add", a, b)?;
        let mut out = self.value(a).clone();
        if bl > 0 {
            let bv = self.value(b).data();
            for chunk in out.data_mut().chunks_exact_mut(bl) {
                for (o, &y) in chunk.iter_mut().zip(bv) {
                    *o += y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let bl = self.check_suffix("mul", a, b)?;
        let mut out = self.value(a).clone();
        if bl > 0 {
            let bv = self.value(b).data();
            for chunk in out.data_mut().chunks_exact_mut(bl) {
                for (o, &y) in chunk.iter_mut().zip(bv) {
                    *o *= y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.last_dim();
        kernels::softmax_rows(out.data_mut(), cols);
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Root-mean-square normalization over the last axis with a learned
    /// per-feature gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, NumericsError> {
        self.rms_norm_eps(x, gain, T::lit(RMS_NORM_EPS))
    }

    pub fn rms_norm_eps(&mut self, x: Var, gain: Var, eps: T) -> Result<Var, NumericsError> {
        let (xs, gs) = (self.shape(x), self.shape(gain));
        if gs.len() != 1 || xs.last() != gs.first() {
            return Err(shape_err("rms_norm", format!("{xs:?} with gain {gs:?}")));
        }
        let mut out = Array::zeros(xs);
        let inv_rms = kernels::rms_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            out.data_mut(),
            eps,
        );
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding_gather", format!("table {ts:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                "embedding_gather",
                format!("id {bad} out of range for table {ts:?}"),
            ));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Array::from_vec(&[ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let out = Array::from_vec(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} {start}..{end}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = end - start;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let out = Array::from_vec(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, factor }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes.iter().all(|&a| a < s.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(shape_err("permute", format!("{s:?} by {axes:?}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let mut out = Array::zeros(&shape);
        kernels::permute(self.value(x).data(), &s, axes, out.data_mut());
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Array::scalar(total), Op::Sum(x), ng)
    }

    /// Mean token-level cross entropy of `[T, V]` logits (leading axes are
    /// flattened) against `labels`; positions labelled `ignore_id` do not
    /// contribute.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        ignore_id: usize,
    ) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = if v == 0 { 0 } else { lv.len() / v };
        if rows != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore_id && l >= v) {
            return Err(shape_err("cross_entropy", format!("label {bad} >= {v} classes")));
        }
        let targets: Vec<Option<usize>> = labels
            .iter()
            .map(|&l| (l != ignore_id).then_some(l))
            .collect();
        let n_valid = targets.iter().flatten().count();
        if n_valid == 0 {
            return Err(NumericsError::AllIgnored);
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, t) in probs.chunks_exact_mut(v).zip(&targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            if let Some(t) = *t {
                // log p = (z_t - max) - ln(sum); z_t - max = ln(row[t]) before normalising
                total += sum.ln() - row[t].ln();
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let loss = total / T::from_usize(n_valid).unwrap();
        let ng = self.ng(logits);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                n_valid,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(NumericsError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::ones(rv.shape()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Array::zeros(node.value.shape()));
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), g);
                    }
                    Some(acc) => {
                        let acc: &mut Array<T> = acc;
                        acc.add_assign_slice(g.data());
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, w, transpose_w } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let k = av.last_dim();
                let m = if k == 0 { 0 } else { av.len() / k };
                let n = node.value.last_dim();
                if self.ng(*a) {
                    let ga = self.grad_slot(grads, *a);
                    // ga[m,k] += g[m,n] @ op(w)^T
                    kernels::matmul(gd, wv.data(), ga.data_mut(), m, n, k, false, !transpose_w, true);
                }
                if self.ng(*w) {
                    let gw = self.grad_slot(grads, *w);
                    if *transpose_w {
                        // gw[n,k] += g^T @ a
                        kernels::matmul(gd, av.data(), gw.data_mut(), n, m, k, true, false, true);
                    } else {
                        kernels::matmul(av.data(), gd, gw.data_mut(), k, m, n, true, false, true);
                    }
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if self.ng(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..batch {
                        kernels::matmul(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !transpose_b,
                            true,
                        );
                    }
                }
                if self.ng(*b) {
                    let gb = self.grad_slot(grads, *b);
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            kernels::matmul(gi, ai, out, n, m, k, true, false, true);
                        } else {
                            kernels::matmul(ai, gi, out, k, m, n, true, false, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    self.grad_slot(grads, *a).add_assign_slice(gd);
                }
                if self.ng(*b) {
                    let gb = self.grad_slot(grads, *b);
                    let bl = gb.len();
                    if bl > 0 {
                        for chunk in gd.chunks_exact(bl) {
                            gb.add_assign_slice(chunk);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bl = bv.len();
                if bl == 0 {
                    return;
                }
                if self.ng(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for (gc, oc) in gd.chunks_exact(bl).zip(ga.data_mut().chunks_exact_mut(bl)) {
                        for ((o, &gv), &y) in oc.iter_mut().zip(gc).zip(bv) {
                            *o += gv * y;
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = self.grad_slot(grads, *b);
                    for (gc, ac) in gd.chunks_exact(bl).zip(av.chunks_exact(bl)) {
                        for ((o, &gv), &x) in gb.data_mut().iter_mut().zip(gc).zip(ac) {
                            *o += gv * x;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x).data();
                    let gx = self.grad_slot(grads, *x);
                    for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.ng(*x) {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    let gx = self.grad_slot(grads, *x);
                    for ((yr, gr), or) in y
                        .chunks_exact(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(gx.data_mut().chunks_exact_mut(cols))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = T::from_usize(d).unwrap();
                if self.ng(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for (((xr, gr), or), &r) in xv
                        .chunks_exact(d)
                        .zip(gd.chunks_exact(d))
                        .zip(gx.data_mut().chunks_exact_mut(d))
                        .zip(inv_rms)
                    {
                        // dy/dx = r*gain*g - x * r^3/d * sum(gain*g*x)
                        let s: T = xr
                            .iter()
                            .zip(gr)
                            .zip(gv)
                            .map(|((&xv, &g), &w)| xv * g * w)
                            .sum();
                        let c = r * r * r * s / dn;
                        for (((o, &xv), &g), &w) in or.iter_mut().zip(xr).zip(gr).zip(gv) {
                            *o += r * w * g - xv * c;
                        }
                    }
                }
                if self.ng(*gain) {
                    let gg = self.grad_slot(grads, *gain);
                    for ((xr, gr), &r) in xv.chunks_exact(d).zip(gd.chunks_exact(d)).zip(inv_rms) {
                        for ((o, &xv), &g) in gg.data_mut().iter_mut().zip(xr).zip(gr) {
                            *o += g * xv * r;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.ng(*table) {
                    let gt = self.grad_slot(grads, *table);
                    let d = gt.last_dim();
                    for (row, &id) in gd.chunks_exact(d.max(1)).zip(ids) {
                        let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    if self.ng(p) {
                        let gp = self.grad_slot(grads, p);
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + w];
                            for (dst, &v) in gp.data_mut()[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *dst += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.ng(*x) {
                    let s = self.shape(*x).to_vec();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let w = node.value.shape()[*axis] * inner;
                    let gx = self.grad_slot(grads, *x);
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        for (dst, &v) in gx.data_mut()[base..base + w]
                            .iter_mut()
                            .zip(&gd[o * w..(o + 1) * w])
                        {
                            *dst += v;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.ng(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for (o, &v) in gx.data_mut().iter_mut().zip(gd) {
                        *o += v * *factor;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    self.grad_slot(grads, *x).add_assign_slice(gd);
                }
            }
            Op::Permute { x, axes } => {
                if self.ng(*x) {
                    let mut back = vec![T::zero(); gd.len()];
                    kernels::permute(gd, node.value.shape(), &kernels::inverse_axes(axes), &mut back);
                    self.grad_slot(grads, *x).add_assign_slice(&back);
                }
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let gx = self.grad_slot(grads, *x);
                    let gv = gd[0];
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                n_valid,
            } => {
                if self.ng(*logits) {
                    let v = self.value(*logits).last_dim();
                    let scale = gd[0] / T::from_usize(*n_valid).unwrap();
                    let gl = self.grad_slot(grads, *logits);
                    for ((or, pr), t) in gl
                        .data_mut()
                        .chunks_exact_mut(v)
                        .zip(probs.chunks_exact(v))
                        .zip(targets)
                    {
                        let Some(t) = *t else { continue };
                        for (o, &p) in or.iter_mut().zip(pr) {
                            *o += p * scale;
                        }
                        or[t] -= scale;
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Array<T>>], v: Var) -> &'g mut Array<T> {
        grads[v.0].get_or_insert_with(|| Array::zeros(self.nodes[v.0].value.shape()))
    }
}
