use super::kernels::{self, AttnDims, MatmulPlan};
use super::{cst, Real, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var, MatmulPlan),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    TransposeLast2(Var),
    BroadcastBatch(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted; backward walks it once in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    wants: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad`. Leaves that the loss
    /// does not depend on get an all-zero gradient; constants get `None`.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if !self.wants[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = kernels::plan_matmul(self.shape(a), self.shape(b))?;
        let data = kernels::matmul_forward(&plan, self.value(a).data(), self.value(b).data());
        let value = Tensor::new(plan.out_shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b, plan), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x[..., n] + bias[n]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_mut(n) {
            for (o, &y) in row.iter_mut().zip(b) {
                *o += y;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = cst::<T>(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// `x * sigmoid(x)`, built from primitive nodes.
    pub fn self_gate(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax();
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n < 2 || self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let mut value = self.value(x).clone();
        let mut xhat = vec![T::zero(); value.numel()];
        let mut rstd = Vec::with_capacity(value.numel() / n);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for (row, h) in value.data_mut().chunks_mut(n).zip(xhat.chunks_mut(n)) {
            rstd.push(kernels::layer_norm_row(row, g, b, cst(eps), Some(h)));
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention with `heads` heads. `q` is `[B, Tq, d]`,
    /// `k` and `v` are `[B, Tk, d]`; the output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err("attention", qs, ks));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(contract(format!(
                "attention width {} not divisible by {heads} heads",
                qs[2]
            )));
        }
        let dims = AttnDims {
            batch: qs[0],
            tq: qs[1],
            tk: ks[1],
            d: qs[2],
            heads,
        };
        let (out, probs) = kernels::attention_forward(
            dims,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let value = Tensor::new(self.shape(q).to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights of an attention node, laid out `[B, heads, Tq, Tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", &s, &[]));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for b in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    data[b * m * n + j * m + i] = src[b * m * n + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::TransposeLast2(x), rg))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.numel());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::new(shape, data).expect("broadcast shape");
        let rg = self.rg(x);
        self.push(value, Op::BroadcastBatch(x), rg)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("mean_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let src = self.value(x).data();
        let inv = T::one() / cst::<T>(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for d in data.iter_mut() {
            *d *= inv;
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(shape_err("cross_entropy", &s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "cross_entropy classes",
                index: bad,
                len: c,
            });
        }
        let probs = self.value(logits).softmax().into_data();
        let mut loss = T::zero();
        for (row, &t) in self.value(logits).data().chunks(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
        }
        loss /= cst::<T>(targets.len() as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let wants: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .collect();
        for (i, w) in wants.iter().enumerate() {
            if !w {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            wants,
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, plan) => {
                if self.rg(*a) {
                    let da = acc(grads, *a, len(*a));
                    kernels::matmul_grad_lhs(plan, g, val(*b), da);
                }
                if self.rg(*b) {
                    let db = acc(grads, *b, len(*b));
                    kernels::matmul_grad_rhs(plan, g, val(*a), db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        for (o, &x) in acc(grads, v, g.len()).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*x) {
                    for (o, &y) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                        *o += y;
                    }
                }
                if self.rg(*bias) {
                    let n = len(*bias);
                    let db = acc(grads, *bias, n);
                    for row in g.chunks(n) {
                        for (o, &y) in db.iter_mut().zip(row) {
                            *o += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = val(*b);
                    for ((o, &y), &w) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += y * w;
                    }
                }
                if self.rg(*b) {
                    let av = val(*a);
                    for ((o, &y), &w) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += y * w;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, &y) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += y * *c;
                }
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                for ((o, &y), &s) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(out) {
                    *o += y * s * (T::one() - s);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                for ((o, &y), &u) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    *o += y * kernels::gelu_grad(u);
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let out = node.value.data();
                let dx = acc(grads, *x, g.len());
                for ((drow, grow), prow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for ((o, &gy), &p) in drow.iter_mut().zip(grow).zip(prow) {
                        *o += p * (gy - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = len(*gain);
                let gv = val(*gain);
                if self.rg(*gain) {
                    let dg = acc(grads, *gain, n);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &y), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o += y * h;
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = acc(grads, *bias, n);
                    for grow in g.chunks(n) {
                        for (o, &y) in db.iter_mut().zip(grow) {
                            *o += y;
                        }
                    }
                }
                if self.rg(*x) {
                    let inv_n = T::one() / cst::<T>(n as f64);
                    let dx = acc(grads, *x, g.len());
                    let mut dh = vec![T::zero(); n];
                    for (((drow, grow), hrow), &r) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .zip(rstd)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..n {
                            dh[i] = grow[i] * gv[i];
                            m1 += dh[i];
                            m2 += dh[i] * hrow[i];
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for i in 0..n {
                            drow[i] += r * (dh[i] - m1 - hrow[i] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let mut dq = self.rg(*q).then(|| vec![T::zero(); len(*q)]);
                let mut dk = self.rg(*k).then(|| vec![T::zero(); len(*k)]);
                let mut dv = self.rg(*v).then(|| vec![T::zero(); len(*v)]);
                kernels::attention_backward(
                    *dims,
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        for (o, x) in acc(grads, var, d.len()).iter_mut().zip(d) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let dv = acc(grads, v, len(v));
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + chunk];
                            for (d, &y) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += y;
                            }
                        }
                    }
                    off += chunk;
                }
            }
            Op::Reshape(x) => {
                for (o, &y) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += y;
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let dx = acc(grads, *x, g.len());
                for b in 0..g.len() / (m * n).max(1) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                        }
                    }
                }
            }
            Op::BroadcastBatch(x) => {
                let n = len(*x);
                let dx = acc(grads, *x, n);
                for row in g.chunks(n) {
                    for (o, &y) in dx.iter_mut().zip(row) {
                        *o += y;
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let full = s[*axis];
                let chunk = node.value.shape()[*axis] * inner;
                let dx = acc(grads, *x, len(*x));
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    for (d, &y) in dx[base..base + chunk]
                        .iter_mut()
                        .zip(&g[o * chunk..(o + 1) * chunk])
                    {
                        *d += y;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let inv = T::one() / cst::<T>(n as f64);
                let dx = acc(grads, *x, len(*x));
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        for (d, &y) in dx[base..base + inner].iter_mut().zip(grow) {
                            *d += y * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let y = g[0];
                for o in acc(grads, *x, len(*x)).iter_mut() {
                    *o += y;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / cst::<T>(targets.len() as f64);
                let dl = acc(grads, *logits, probs.len());
                for (b, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[b * c + j] += (probs[b * c + j] - onehot) * scale;
                    }
                }
            }
        }
    }
}
