//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! creation order, so the node vector is already a topological order and
//! `backward` simply walks it in reverse. Parameters are copied into the
//! graph as leaves (one leaf per parameter, however often it is used) and
//! their gradients are pushed back into the [`ParamStore`] afterwards.

use std::collections::HashMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `bcast` means rhs is a trailing vector repeated over the rows of lhs.
    Binary {
        op: Binary,
        a: NodeId,
        b: NodeId,
        bcast: bool,
    },
    Affine {
        x: NodeId,
        scale: T,
    },
    Unary(Unary, NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
        frozen_row: Option<usize>,
    },
    SelectRows {
        keep: Vec<bool>,
        a: NodeId,
        b: NodeId,
    },
    SoftmaxMasked {
        x: NodeId,
        mask: Vec<bool>,
    },
    AttentionPool {
        alphas: NodeId,
        z: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rows: Vec<bool>,
        count: usize,
        mean: Vec<T>,
        var: Vec<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BceLogits {
        z: NodeId,
        labels: Vec<T>,
    },
    BceProb {
        p: NodeId,
        labels: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Identity forward with a deliberately wrong (doubled) backward rule;
    /// exists only so tests can confirm the checker catches bad rules.
    #[cfg(test)]
    Faulty(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of the last `backward` calls, if any reached `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, n);
        n
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    /// Adds the gradients held by parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&pid, &nid) in &self.params {
            if let Some(g) = &self.nodes[nid.0].grad {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }

    // ---- forward ops ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Elementwise binary op. `b` may also be a vector whose length equals
    /// the trailing width of a 2-D `a` (bias over the batch dimension).
    pub fn binary(&mut self, op: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = if sa == sb {
            false
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            true
        } else {
            return Err(Error::dim(
                match op {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                &sa,
                &sb,
            ));
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let w = vb.len();
        let f = |x: T, y: T| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<T> = if bcast {
            va.iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % w]))
                .collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&sa, data)?, Op::Binary { op, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let v = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(v, Op::Affine { x, scale }, rg)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -T::one(), T::one())
    }

    pub fn unary(&mut self, op: Unary, x: NodeId) -> NodeId {
        let v = match op {
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Tanh => self.value(x).map(T::tanh),
            Unary::Relu => self.value(x).map(|v| v.max(T::zero())),
        };
        let rg = self.rg(&[x]);
        self.push(v, Op::Unary(op, x), rg)
    }

    /// Which side of the kink every relu input sits on, in node order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Unary(Unary::Relu, x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Relu, x)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut along = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = along;
        let mut data = Vec::with_capacity(outer * along * inner);
        for o in 0..outer {
            for &id in inputs {
                let chunk = self.shape(id)[axis] * inner;
                data.extend_from_slice(&self.value(id).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous block of leading-axis rows `[start, start + len)`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::dim("slice_rows", &s, &[start, len]));
        }
        let c = self.value(x).cols();
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceRows { x, start }, rg))
    }

    /// Gathers leading-axis rows. Gradients scatter-add back; `frozen_row`
    /// never receives gradient (embedding padding row).
    pub fn gather_rows(
        &mut self,
        x: NodeId,
        idx: &[usize],
        frozen_row: Option<usize>,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::OutOfVocab {
                id: bad,
                vocab: s[0],
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * xv.cols());
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                frozen_row,
            },
            rg,
        ))
    }

    /// Row-wise choice: row `r` comes from `a` if `keep[r]`, else from `b`.
    pub fn select_rows(&mut self, keep: &[bool], a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa[0] != keep.len() {
            return Err(Error::dim("select_rows", &sa, &sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(va.len());
        for (r, &k) in keep.iter().enumerate() {
            data.extend_from_slice(if k { va.row(r) } else { vb.row(r) });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&sa, data)?,
            Op::SelectRows {
                keep: keep.to_vec(),
                a,
                b,
            },
            rg,
        ))
    }

    /// Row-wise softmax over unmasked positions; masked positions are
    /// exactly zero. `mask` is row-major with the same shape as `x`.
    pub fn softmax_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(Error::dim("softmax_masked", &s, &[mask.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let xs = &xv[r * cols..(r + 1) * cols];
            let max = xs
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(Error::DegenerateMask { row: r })?;
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for c in 0..cols {
                if m[c] {
                    o[c] = (xs[c] - max).exp();
                    total += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::SoftmaxMasked {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = Σ_t alphas[i, t] · z[t·n + i]` with `alphas: [n×T]` and
    /// `z: [T·n × D]` in time-major row order.
    pub fn attention_pool(&mut self, alphas: NodeId, z: NodeId) -> Result<NodeId> {
        let (sa, sz) = (self.shape(alphas).to_vec(), self.shape(z).to_vec());
        if sa.len() != 2 || sz.len() != 2 || sa[0] * sa[1] != sz[0] {
            return Err(Error::dim("attention_pool", &sa, &sz));
        }
        let (n, steps, d) = (sa[0], sa[1], sz[1]);
        let (av, zv) = (self.value(alphas).data(), self.value(z).data());
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for t in 0..steps {
                let a = av[i * steps + t];
                if a == T::zero() {
                    continue;
                }
                let zr = &zv[(t * n + i) * d..(t * n + i + 1) * d];
                for (ov, &zz) in o.iter_mut().zip(zr) {
                    *ov += a * zz;
                }
            }
        }
        let rg = self.rg(&[alphas, z]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::AttentionPool { alphas, z },
            rg,
        ))
    }

    /// Train-mode batch normalization over the rows flagged in `rows`.
    /// Unflagged rows produce zeros and neither contribute to nor receive
    /// gradient from the statistics. Returns the node together with the
    /// biased batch mean and variance.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rows: &[bool],
        eps: T,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.len() != s[0] {
            return Err(Error::dim("batch_norm", &s, &[rows.len()]));
        }
        let d = s[1];
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("batch_norm", &s, self.shape(gamma)));
        }
        let count = rows.iter().filter(|&&r| r).count();
        if count < 2 {
            return Err(Error::Contract(format!(
                "batch norm in train mode needs at least 2 rows, got {count}"
            )));
        }
        let xv = self.value(x).data();
        let m = T::of(count as f64);
        let mut mean = vec![T::zero(); d];
        for (r, _) in rows.iter().enumerate().filter(|(_, &k)| k) {
            for j in 0..d {
                mean[j] += xv[r * d + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![T::zero(); d];
        for (r, _) in rows.iter().enumerate().filter(|(_, &k)| k) {
            for j in 0..d {
                let c = xv[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); s[0] * d];
        let mut out = vec![T::zero(); s[0] * d];
        for (r, _) in rows.iter().enumerate().filter(|(_, &k)| k) {
            for j in 0..d {
                let h = (xv[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                rows: rows.to_vec(),
                count,
                mean,
                var,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch mean and biased variance recorded by a [`Graph::batch_norm`] node.
    pub fn batch_norm_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, z: NodeId, labels: &[T]) -> Result<NodeId> {
        let s = self.shape(z).to_vec();
        if s.len() != 1 || s[0] != labels.len() {
            return Err(Error::dim("bce_with_logits", &s, &[labels.len()]));
        }
        let n = T::of(labels.len() as f64);
        let loss = self
            .value(z)
            .data()
            .iter()
            .zip(labels)
            .map(|(&zv, &y)| softplus(zv) - y * zv)
            .sum::<T>()
            / n;
        let rg = self.rg(&[z]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy computed from probabilities.
    pub fn bce_prob(&mut self, p: NodeId, labels: &[T]) -> Result<NodeId> {
        let s = self.shape(p).to_vec();
        if s.len() != 1 || s[0] != labels.len() {
            return Err(Error::dim("bce_prob", &s, &[labels.len()]));
        }
        let n = T::of(labels.len() as f64);
        let mut total = T::zero();
        for (&pv, &y) in self.value(p).data().iter().zip(labels) {
            if y != T::zero() {
                total -= y * pv.ln();
            }
            if y != T::one() {
                total -= (T::one() - y) * (T::one() - pv).ln();
            }
        }
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceProb {
                p,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = t.sum() / T::of(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    #[cfg(test)]
    pub(crate) fn faulty_identity(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(v, Op::Faulty(x), rg)
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates d`loss`/d`node` into every reachable node that requires
    /// a gradient. Calling it twice without [`Graph::zero_grads`] doubles
    /// the stored gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |id: NodeId| &nodes[id.0].value;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Tensor<T>>],
            nodes: &[Node<T>],
            id: NodeId,
        ) -> &'a mut [T] {
            grads[id.0]
                .get_or_insert_with(|| Tensor::zeros(nodes[id.0].value.shape()))
                .data_mut()
        }
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(a) {
                    let bv = val(b).data();
                    kernels::gemm_nt(gd, bv, slot(grads, nodes, a), m, k, n);
                }
                if wants(b) {
                    let av = val(a).data();
                    kernels::gemm_tn(av, gd, slot(grads, nodes, b), m, k, n);
                }
            }
            &Op::Binary { op, a, b, bcast } => {
                let w = val(b).len();
                if wants(a) {
                    let ga = slot(grads, nodes, a);
                    match op {
                        Binary::Add | Binary::Sub => {
                            ga.iter_mut().zip(gd).for_each(|(o, &v)| *o += v)
                        }
                        Binary::Mul => {
                            let bv = val(b).data();
                            for (k, (o, &v)) in ga.iter_mut().zip(gd).enumerate() {
                                *o += v * bv[if bcast { k % w } else { k }];
                            }
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    let av = val(a).data();
                    for (k, &v) in gd.iter().enumerate() {
                        let j = if bcast { k % w } else { k };
                        gb[j] += match op {
                            Binary::Add => v,
                            Binary::Sub => -v,
                            Binary::Mul => v * av[k],
                        };
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    gx.iter_mut().zip(gd).for_each(|(o, &v)| *o += scale * v);
                }
            }
            &Op::Unary(op, x) => {
                if wants(x) {
                    let y = nodes[i].value.data();
                    let gx = slot(grads, nodes, x);
                    for ((o, &v), &yv) in gx.iter_mut().zip(gd).zip(y) {
                        *o += v * match op {
                            Unary::Sigmoid => yv * (T::one() - yv),
                            Unary::Tanh => T::one() - yv * yv,
                            Unary::Relu => {
                                if yv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    gx.iter_mut().zip(gd).for_each(|(o, &v)| *o += v);
                }
            }
            &Op::Transpose(x) => {
                if wants(x) {
                    let s = val(x).shape();
                    let (r, c) = (s[0], s[1]);
                    let gx = slot(grads, nodes, x);
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += gd[b * r + a];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let base = val(inputs[0]).shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total: usize = inputs.iter().map(|&id| val(id).shape()[*axis]).sum();
                let mut offset = 0;
                for &id in inputs {
                    let chunk = val(id).shape()[*axis] * inner;
                    if wants(id) {
                        let gx = slot(grads, nodes, id);
                        for o in 0..outer {
                            let src = &gd[o * total * inner + offset..][..chunk];
                            for (d, &v) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::SliceRows { x, start } => {
                if wants(x) {
                    let c = val(x).cols();
                    let gx = slot(grads, nodes, x);
                    for (o, &v) in gx[start * c..].iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::GatherRows { x, idx, frozen_row } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let gx = slot(grads, nodes, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        if Some(src) == *frozen_row {
                            continue;
                        }
                        for (o, &v) in gx[src * c..(src + 1) * c].iter_mut().zip(&gd[r * c..]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SelectRows { keep, a, b } => {
                let c = g.cols();
                for (target, want_keep) in [(*a, true), (*b, false)] {
                    if !wants(target) {
                        continue;
                    }
                    let gt = slot(grads, nodes, target);
                    for (r, &k) in keep.iter().enumerate() {
                        if k == want_keep {
                            for (o, &v) in gt[r * c..(r + 1) * c].iter_mut().zip(&gd[r * c..]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxMasked { x, mask } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let cols = g.shape()[1];
                    let gx = slot(grads, nodes, *x);
                    for r in 0..g.shape()[0] {
                        let span = r * cols..(r + 1) * cols;
                        let dot: T = y[span.clone()]
                            .iter()
                            .zip(&gd[span.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for k in span {
                            if mask[k] {
                                gx[k] += y[k] * (gd[k] - dot);
                            }
                        }
                    }
                }
            }
            &Op::AttentionPool { alphas, z } => {
                let sa = val(alphas).shape();
                let (n, steps) = (sa[0], sa[1]);
                let d = val(z).shape()[1];
                if wants(alphas) {
                    let zv = val(z).data();
                    let ga = slot(grads, nodes, alphas);
                    for i2 in 0..n {
                        let gi = &gd[i2 * d..(i2 + 1) * d];
                        for t in 0..steps {
                            let zr = &zv[(t * n + i2) * d..(t * n + i2 + 1) * d];
                            ga[i2 * steps + t] +=
                                gi.iter().zip(zr).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
                if wants(z) {
                    let av = val(alphas).data();
                    let gz = slot(grads, nodes, z);
                    for i2 in 0..n {
                        let gi = &gd[i2 * d..(i2 + 1) * d];
                        for t in 0..steps {
                            let a = av[i2 * steps + t];
                            let row = &mut gz[(t * n + i2) * d..(t * n + i2 + 1) * d];
                            for (o, &v) in row.iter_mut().zip(gi) {
                                *o += a * v;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                rows,
                count,
                xhat,
                inv_std,
                ..
            } => {
                let d = inv_std.len();
                let valid = || rows.iter().enumerate().filter(|(_, &k)| k).map(|(r, _)| r);
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for r in valid() {
                    for j in 0..d {
                        sum_g[j] += gd[r * d + j];
                        sum_gx[j] += gd[r * d + j] * xhat[r * d + j];
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    gb.iter_mut().zip(&sum_g).for_each(|(o, &v)| *o += v);
                }
                if wants(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    gg.iter_mut().zip(&sum_gx).for_each(|(o, &v)| *o += v);
                }
                if wants(*x) {
                    let gv = val(*gamma).data().to_vec();
                    let m = T::of(*count as f64);
                    let gx = slot(grads, nodes, *x);
                    for r in valid() {
                        for j in 0..d {
                            let k = r * d + j;
                            gx[k] += gv[j] * inv_std[j] / m
                                * (m * gd[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                        }
                    }
                }
            }
            Op::BceLogits { z, labels } => {
                if wants(*z) {
                    let n = T::of(labels.len() as f64);
                    let zv = val(*z).data();
                    let gz = slot(grads, nodes, *z);
                    for ((o, &zz), &y) in gz.iter_mut().zip(zv).zip(labels) {
                        *o += gd[0] * (sigmoid(zz) - y) / n;
                    }
                }
            }
            Op::BceProb { p, labels } => {
                if wants(*p) {
                    let n = T::of(labels.len() as f64);
                    let pv = val(*p).data();
                    let gp = slot(grads, nodes, *p);
                    for ((o, &pp), &y) in gp.iter_mut().zip(pv).zip(labels) {
                        let mut d = T::zero();
                        if y != T::zero() {
                            d -= y / pp;
                        }
                        if y != T::one() {
                            d += (T::one() - y) / (T::one() - pp);
                        }
                        *o += gd[0] * d / n;
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    gx.iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            #[cfg(test)]
            &Op::Faulty(x) => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    gx.iter_mut().zip(gd).for_each(|(o, &v)| *o += v + v);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    let s = gd[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
        }
    }
}
