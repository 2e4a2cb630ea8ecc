//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are referenced by the copyable handle [`Var`]. Parameters enter the graph
//! by name through [`Graph::param`]; [`Graph::backward`] returns one gradient
//! per registered parameter and clears the record.

use std::collections::{BTreeMap, HashMap};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    GmmWeights {
        alpha: Var,
        beta: Var,
        kappa: Var,
    },
    AdditiveScores {
        query: Var,
        keys: Var,
        v: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather(..) => "gather",
            Op::GmmWeights { .. } => "gmm_weights",
            Op::AdditiveScores { .. } => "additive_scores",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Record of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn mm(m: usize, k: usize, n: usize, a: &[f64], ars: isize, acs: isize, b: &[f64], brs: isize, bcs: isize, c: &mut [f64], beta: f64) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: strides and extents describe the caller's slices exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars,
            acs,
            b.as_ptr(),
            brs,
            bcs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Second operand must broadcast over the trailing axes of the first.
fn check_suffix(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(());
    }
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::Contract(format!(
            "{op}: shape {b:?} does not broadcast over {a:?}"
        )));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not a named parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named parameter. Repeated requests for the same name
    /// return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Contract(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Contract(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            mm(
                m,
                k,
                n,
                &ad[i * m * k..],
                k as isize,
                1,
                &bd[i * k * n..],
                n as isize,
                1,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![bs, m, n], out),
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        check_suffix(self.shape(a), self.shape(b), name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bn = bv.numel();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over trailing axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| scale * x + shift).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Elementwise `a / d`, computed by true division so that exact
    /// quotients stay exact.
    pub fn div_scalar(&mut self, a: Var, d: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x / d).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::Affine(a, 1.0 / d), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Softmax over the last axis. Entries where `mask` is false get zero
    /// weight; a fully masked row yields all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let w = *shape
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        if let Some(m) = mask {
            if m.len() != av.numel() {
                return Err(Error::Contract("softmax mask size".into()));
            }
        }
        let mut out = vec![0.0; av.numel()];
        for (r, row) in av.data().chunks(w.max(1)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * w + j]);
            let max = (0..w)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..w {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[r * w + j] = e;
                    total += e;
                }
            }
            for j in 0..w {
                out[r * w + j] /= total;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Contract(format!("concat: {s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{end} on axis {axis} of {s:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = w;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Rows of a `[V, E]` table selected by `ids`, giving `[ids.len(), E]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Contract(format!("gather from {s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Contract(format!("gather index {bad} >= {}", s[0])));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * s[1]);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), s[1]], data),
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Mixture-of-Gaussians attention weights at integer positions:
    /// `phi[b, u] = sum_k alpha[b,k] * exp(-beta[b,k] * (kappa[b,k] - u)^2)`
    /// for `u in 0..positions`. Inputs are `[B, K]`, output `[B, positions]`.
    pub fn gmm_weights(&mut self, alpha: Var, beta: Var, kappa: Var, positions: usize) -> Result<Var> {
        let s = self.shape(alpha).to_vec();
        if s.len() != 2 || self.shape(beta) != s.as_slice() || self.shape(kappa) != s.as_slice() {
            return Err(Error::Contract("gmm_weights: alpha/beta/kappa shapes".into()));
        }
        let (b, k) = (s[0], s[1]);
        let (a, be, ka) = (
            self.value(alpha).data(),
            self.value(beta).data(),
            self.value(kappa).data(),
        );
        let mut out = vec![0.0; b * positions];
        for i in 0..b {
            for c in 0..k {
                let (al, bt, kp) = (a[i * k + c], be[i * k + c], ka[i * k + c]);
                for u in 0..positions {
                    let d = kp - u as f64;
                    out[i * positions + u] += al * (-bt * d * d).exp();
                }
            }
        }
        let rg = self.rg(&[alpha, beta, kappa]);
        Ok(self.push(
            Tensor::from_parts(vec![b, positions], out),
            Op::GmmWeights { alpha, beta, kappa },
            rg,
        ))
    }

    /// Additive attention energies
    /// `e[b, t, w] = sum_a v[a] * tanh(query[b, t, a] + keys[b, w, a])`.
    pub fn additive_scores(&mut self, query: Var, keys: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(query), self.shape(keys), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || sv != [sq[2]] {
            return Err(Error::Contract(format!(
                "additive_scores: {sq:?}, {sk:?}, {sv:?}"
            )));
        }
        let (b, t, w, a) = (sq[0], sq[1], sk[1], sq[2]);
        let (qd, kd, vd) = (
            self.value(query).data(),
            self.value(keys).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; b * t * w];
        for i in 0..b {
            for ti in 0..t {
                let q = &qd[(i * t + ti) * a..(i * t + ti + 1) * a];
                for wi in 0..w {
                    let kk = &kd[(i * w + wi) * a..(i * w + wi + 1) * a];
                    out[(i * t + ti) * w + wi] = (0..a).map(|j| vd[j] * (q[j] + kk[j]).tanh()).sum();
                }
            }
        }
        let rg = self.rg(&[query, keys, v]);
        Ok(self.push(
            Tensor::from_parts(vec![b, t, w], out),
            Op::AdditiveScores { query, keys, v },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// registered parameter (zeros where the loss does not depend on it) and
    /// clears the record.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.backward_all(loss)?;
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let value = &self.nodes[v.0].value;
            let g = match &grads[v.0] {
                Some(g) => Tensor::from_parts(value.shape().to_vec(), g.clone()),
                None => Tensor::zeros(value.shape()),
            };
            out.insert(name.clone(), g);
        }
        self.clear();
        Ok(out)
    }

    /// Gradient of `loss` with respect to the given leaves, without clearing.
    pub fn grad_of(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward_all(loss)?;
        Ok(leaves
            .iter()
            .map(|v| {
                let shape = self.shape(*v).to_vec();
                match &grads[v.0] {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.param_index.clear();
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Some(op) = self.first_non_finite(node, &grads) {
                return Err(Error::NonFinite { op });
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn first_non_finite(&self, node: &Node, grads: &[Option<Vec<f64>>]) -> Option<&'static str> {
        let bad = |v: &Var| {
            grads[v.0]
                .as_ref()
                .is_some_and(|g| g.iter().any(|x| !x.is_finite()))
        };
        let inputs: Vec<Var> = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::BatchMatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Softplus(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gather(a, _) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat(parts, _) => parts.clone(),
            Op::GmmWeights { alpha, beta, kappa } => vec![*alpha, *beta, *kappa],
            Op::AdditiveScores { query, keys, v } => vec![*query, *keys, *v],
        };
        inputs.iter().any(bad).then(|| node.op.name())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |ga| {
                    mm(m, n, k, g, n as isize, 1, bd, 1, n as isize, ga, 1.0)
                });
                self.accumulate(grads, *b, |gb| {
                    mm(k, m, n, ad, 1, k as isize, g, n as isize, 1, gb, 1.0)
                });
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bs {
                        mm(m, n, k, &g[i * m * n..], n as isize, 1, &bd[i * k * n..], 1, n as isize, &mut ga[i * m * k..], 1.0);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bs {
                        mm(k, m, n, &ad[i * m * k..], 1, k as isize, &g[i * m * n..], n as isize, 1, &mut gb[i * k * n..], 1.0);
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                self.accumulate(grads, *b, |gb| {
                    let n = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % n] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let bn = bd.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * bd[i % bn];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % bn] += y * ad[i];
                    }
                });
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / ad[i];
                    }
                })
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Abs(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * if ad[i] > 0.0 { 1.0 } else if ad[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                })
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(ad[i]);
                    }
                })
            }
            Op::Softmax(a) => {
                let w = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.len() / w.max(1) {
                        let row = r * w..(r + 1) * w;
                        let dot: f64 = out[row.clone()].iter().zip(&g[row.clone()]).map(|(y, gy)| y * gy).sum();
                        for j in row {
                            ga[j] += out[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                let w = node.value.shape()[*axis];
                self.accumulate(grads, *input, |gi| {
                    for o in 0..outer {
                        let dst = &mut gi[(o * len + start) * inner..(o * len + start + w) * inner];
                        let src = &g[o * w * inner..(o + 1) * w * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => self.accumulate(grads, *a, |ga| {
                let n = ga.len().max(1) as f64;
                ga.iter_mut().for_each(|x| *x += g[0] / n)
            }),
            Op::Gather(table, ids) => {
                let e = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..e {
                            gt[i * e + j] += g[r * e + j];
                        }
                    }
                })
            }
            Op::GmmWeights { alpha, beta, kappa } => {
                let s = self.shape(*alpha);
                let (b, k) = (s[0], s[1]);
                let t = node.value.shape()[1];
                let (a, be, ka) = (
                    self.value(*alpha).data(),
                    self.value(*beta).data(),
                    self.value(*kappa).data(),
                );
                let mut da = vec![0.0; b * k];
                let mut db = vec![0.0; b * k];
                let mut dk = vec![0.0; b * k];
                for i in 0..b {
                    for c in 0..k {
                        let j = i * k + c;
                        for u in 0..t {
                            let d = ka[j] - u as f64;
                            let e = (-be[j] * d * d).exp();
                            let gu = g[i * t + u];
                            da[j] += gu * e;
                            db[j] -= gu * a[j] * e * d * d;
                            dk[j] -= gu * 2.0 * a[j] * be[j] * d * e;
                        }
                    }
                }
                for (v, d) in [(alpha, da), (beta, db), (kappa, dk)] {
                    self.accumulate(grads, *v, |gv| gv.iter_mut().zip(&d).for_each(|(x, y)| *x += y));
                }
            }
            Op::AdditiveScores { query, keys, v } => {
                let (sq, sk) = (self.shape(*query), self.shape(*keys));
                let (b, t, w, a) = (sq[0], sq[1], sk[1], sq[2]);
                let (qd, kd, vd) = (
                    self.value(*query).data(),
                    self.value(*keys).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; a];
                for i in 0..b {
                    for ti in 0..t {
                        let qo = (i * t + ti) * a;
                        for wi in 0..w {
                            let ko = (i * w + wi) * a;
                            let gs = g[(i * t + ti) * w + wi];
                            if gs == 0.0 {
                                continue;
                            }
                            for j in 0..a {
                                let h = (qd[qo + j] + kd[ko + j]).tanh();
                                dv[j] += gs * h;
                                let dh = gs * vd[j] * (1.0 - h * h);
                                dq[qo + j] += dh;
                                dk[ko + j] += dh;
                            }
                        }
                    }
                }
                for (var, d) in [(query, dq), (keys, dk), (v, dv)] {
                    self.accumulate(grads, *var, |gv| gv.iter_mut().zip(&d).for_each(|(x, y)| *x += y));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
        assert!(g.is_empty());
    }

    #[test]
    fn div_scalar_is_exact_and_differentiable() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::vector(vec![49.0, 7.0]), true);
        let y = g.div_scalar(x, 49.0);
        assert_eq!(g.value(y).data()[0], 1.0);
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap()["x"].data(), &[1.0 / 49.0, 1.0 / 49.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(0.0), true);
        let y = g.tanh(x);
        assert_eq!(g.backward(y).unwrap()["x"].item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_names_the_primitive() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(0.0), true);
        let y = g.log(x);
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log" }), "{err}");
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(2.0), true);
        let _unused = g.param("w", &Tensor::zeros(&[2, 3]), true);
        let y = g.exp(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["w"], Tensor::zeros(&[2, 3]));
        assert!((grads["x"].item() - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 900.0]).unwrap());
        let mask = [true, true, false, true, true, true];
        let y = g.softmax(x, Some(&mask)).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[2], 0.0);
        assert!((v[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = g.softmax(x, Some(&[false, false])).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_accumulates_bias_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.param("b", &Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let y = g.add(a, b).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap()["b"].data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
    }
}
