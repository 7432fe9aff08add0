//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are registered with
//! [`Tape::leaf`]; every operation appends a node whose backward rule is
//! replayed exactly once, in reverse recording order, by [`Tape::backward`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("positive extents")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar")
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Empty("from_rows"));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    DivScalar(Var, Var),
    AddBias(Var, Var),
    AddBroadcastLast(Var, Var),
    LeakyRelu(Var, T),
    MaxAxis {
        input: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Frobenius(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        src: Var,
        idx: Rc<[usize]>,
    },
    Reshape(Var),
    HomogeneousDivide {
        input: Var,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backpropagated: bool,
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag decides whether
    /// a gradient is accumulated for it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node is well formed")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Hash of every piecewise-linear branch taken on the tape: argmax
    /// routing, leaky-ReLU signs and homogeneous-divisor clamps.
    ///
    /// Two forward passes with equal fingerprints lie on the same smooth
    /// piece of the function.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxAxis { argmax, .. } => argmax.hash(&mut h),
                Op::LeakyRelu(a, _) => {
                    for chunk in self.nodes[a.0].data.chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (i, &x)| acc | (((x > T::zero()) as u64) << i));
                        bits.hash(&mut h);
                    }
                }
                Op::HomogeneousDivide { input, eps } => {
                    let q = &self.nodes[input.0].data;
                    let n = node.shape[1];
                    for &w in &q[3 * n..] {
                        (w.abs() >= *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Matrix product of `a` (`m × n`) and `b` (`n × ...`); trailing
    /// dimensions of `b` are treated as flattened columns and kept in the
    /// output shape.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() < 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let p = self.value(b).len() / n;
        let out = matmul_raw(self.value(a), self.value(b), m, n, p);
        let mut shape = sb;
        shape[0] = m;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if self.shape(a) == self.shape(b) {
            Ok(va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else if vb.len() == 1 {
            Ok(va.iter().map(|&x| f(x, vb[0])).collect())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            })
        }
    }

    /// Elementwise `a + b`; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise `a - b`; `b` may be a one-element tensor.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    /// Elementwise product; `b` may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// Divides every element of `a` by the one-element node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "div_scalar",
                left: self.shape(a).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let d = self.scalar(s);
        let out = self.value(a).iter().map(|&x| x / d).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(self.shape(a).to_vec(), out, Op::DivScalar(a, s), rg))
    }

    /// `x[r, ...] += b[r]` for `x` with leading extent `r` and `b` of length `r`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.value(b).len() != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: sx,
                right: self.shape(b).to_vec(),
            });
        }
        let m = self.value(x).len() / sx[0];
        let bv = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i / m])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(sx, out, Op::AddBias(x, b), rg))
    }

    /// `x[:, :, j] + y` for `x` of shape `h × n × k` and `y` of shape `h × n`.
    pub fn add_broadcast_last(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx.len() != 3 || sy.len() != 2 || sx[0] != sy[0] || sx[1] != sy[1] {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast_last",
                left: sx,
                right: sy,
            });
        }
        let k = sx[2];
        let yv = self.value(y);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yv[i / k])
            .collect();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(sx, out, Op::AddBroadcastLast(x, y), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::LeakyRelu(a, slope), rg)
    }

    /// Maximum along `axis`, which is removed from the shape (a 1-D input
    /// yields a one-element tensor). Ties route to the lowest index.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::InvalidArgument {
                op: "max_over_axis",
                msg: format!("axis {axis} out of range for shape {sa:?}"),
            });
        }
        let (outer, len, inner) = strides(&sa, axis);
        if len == 0 {
            return Err(Error::Empty("max_over_axis"));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for l in 1..len {
                    let idx = base + l * inner;
                    if v[idx] > v[best] {
                        best = idx;
                    }
                }
                out.push(v[best]);
                argmax.push(best);
            }
        }
        let mut shape: Vec<usize> = sa[..axis].iter().chain(&sa[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::MaxAxis { input: a, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&x| x * x).sum::<T>().sqrt();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Frobenius(a), rg)
    }

    /// Mean softmax cross-entropy over the columns of a `C × M` logit matrix.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        let (c, m) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: bad,
                extent: c,
            });
        }
        let v = self.value(logits);
        let mut probs = vec![T::zero(); c * m];
        let mut loss = T::zero();
        for col in 0..m {
            let mx = (0..c).map(|r| v[r * m + col]).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|r| (v[r * m + col] - mx).exp()).sum();
            for r in 0..c {
                probs[r * m + col] = (v[r * m + col] - mx).exp() / z;
            }
            loss = loss + z.ln() + mx - v[labels[col] * m + col];
        }
        loss = loss / T::lit(m as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat"))?;
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {s0:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: s0,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = strides(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {sa:?}", start + len),
            });
        }
        let (outer, full, inner) = strides(&sa, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// `out[:, i, j] = src[:, idx[i * k + j]]` for `src` of shape `f × n` and
    /// a row-major `n × k` index table. Indices carry no gradient.
    pub fn gather_cols(&mut self, src: Var, idx: &[usize], k: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != 2 || k == 0 || idx.len() != s[1] * k {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                left: s,
                right: vec![idx.len() / k.max(1), k],
            });
        }
        let (f, n) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                extent: n,
            });
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(f * n * k);
        for r in 0..f {
            let row = &v[r * n..(r + 1) * n];
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let rg = self.rg(src);
        Ok(self.push(
            vec![f, n, k],
            out,
            Op::Gather {
                src,
                idx: Rc::from(idx),
            },
            rg,
        ))
    }

    /// Projects a `4 × n` homogeneous matrix to `3 × n` by dividing through
    /// the last row. The divisor is clamped to magnitude `eps` keeping its
    /// sign (zero counts as positive).
    pub fn homogeneous_divide(&mut self, a: Var, eps: T) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != 4 {
            return Err(Error::ShapeMismatch {
                op: "homogeneous_divide",
                left: s,
                right: vec![4, 0],
            });
        }
        let n = s[1];
        let v = self.value(a);
        let mut out = Vec::with_capacity(3 * n);
        for r in 0..3 {
            for i in 0..n {
                out.push(v[r * n + i] / clamp_divisor(v[3 * n + i], eps));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![3, n], out, Op::HomogeneousDivide { input: a, eps }, rg))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let acc_in = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].data.len()]);
            f(buf);
        };
        // pass-through gradients seed an empty slot by copy
        let pass = |v: Var, grads: &mut [Option<Vec<T>>]| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, g),
                slot @ None => *slot = Some(g.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                let p = bv.len() / n;
                acc_in(grads, *a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for k in 0..n {
                            ga[i * n + k] = ga[i * n + k] + dot(grow, &bv[k * p..(k + 1) * p]);
                        }
                    }
                });
                acc_in(grads, *b, &mut |gb| {
                    for i in 0..m {
                        for k in 0..n {
                            let aik = av[i * n + k];
                            let row = &mut gb[k * p..(k + 1) * p];
                            for (dst, &gij) in row.iter_mut().zip(&g[i * p..(i + 1) * p]) {
                                *dst = *dst + aik * gij;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                pass(*a, grads);
                acc_in(grads, *b, &mut |gb| {
                    if gb.len() == g.len() {
                        gb.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + sign * x);
                    } else {
                        gb[0] = gb[0] + sign * g.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                let bcast = bv.len() != av.len();
                acc_in(grads, *a, &mut |ga| {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[i] * bv[if bcast { 0 } else { i }];
                    }
                });
                acc_in(grads, *b, &mut |gb| {
                    if bcast {
                        gb[0] = gb[0] + g.iter().zip(av).map(|(&x, &y)| x * y).sum::<T>();
                    } else {
                        for (i, d) in gb.iter_mut().enumerate() {
                            *d = *d + g[i] * av[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc_in(grads, *a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c);
            }),
            Op::DivScalar(a, s) => {
                let d = nodes[s.0].data[0];
                acc_in(grads, *a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(dst, &x)| *dst = *dst + x / d);
                });
                let out = &node.data;
                acc_in(grads, *s, &mut |gs| {
                    let dot: T = g.iter().zip(out).map(|(&x, &y)| x * y).sum();
                    gs[0] = gs[0] - dot / d;
                });
            }
            Op::AddBias(x, b) => {
                let m = node.data.len() / node.shape[0];
                pass(*x, grads);
                acc_in(grads, *b, &mut |gb| {
                    for (r, d) in gb.iter_mut().enumerate() {
                        *d = *d + g[r * m..(r + 1) * m].iter().copied().sum::<T>();
                    }
                });
            }
            Op::AddBroadcastLast(x, y) => {
                let k = node.shape[2];
                pass(*x, grads);
                acc_in(grads, *y, &mut |gy| {
                    for (i, d) in gy.iter_mut().enumerate() {
                        *d = *d + g[i * k..(i + 1) * k].iter().copied().sum::<T>();
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = &nodes[a.0].data;
                acc_in(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        let d = if av[i] > T::zero() { T::one() } else { *slope };
                        ga[i] = ga[i] + g[i] * d;
                    }
                });
            }
            Op::MaxAxis { input, argmax } => acc_in(grads, *input, &mut |gi| {
                for (o, &src) in argmax.iter().enumerate() {
                    gi[src] = gi[src] + g[o];
                }
            }),
            Op::Sum(a) => acc_in(grads, *a, &mut |ga| ga.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Frobenius(a) => {
                let norm = node.data[0];
                let av = &nodes[a.0].data;
                acc_in(grads, *a, &mut |ga| {
                    if norm > T::zero() {
                        for i in 0..ga.len() {
                            ga[i] = ga[i] + g[0] * av[i] / norm;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                let scale = g[0] / T::lit(m as f64);
                acc_in(grads, *logits, &mut |gl| {
                    for (i, d) in gl.iter_mut().enumerate() {
                        *d = *d + probs[i] * scale;
                    }
                    for (col, &l) in labels.iter().enumerate() {
                        gl[l * m + col] = gl[l * m + col] - scale;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = strides(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].shape[*axis];
                    acc_in(grads, v, &mut |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut gv[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, full, inner) = strides(&nodes[input.0].shape, *axis);
                let len = node.shape[*axis];
                acc_in(grads, *input, &mut |gi| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut gi[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Reshape(a) => pass(*a, grads),
            Op::Gather { src, idx } => {
                let n = nodes[src.0].shape[1];
                let per_row = idx.len();
                acc_in(grads, *src, &mut |gs| {
                    for r in 0..nodes[src.0].shape[0] {
                        let grow = &mut gs[r * n..(r + 1) * n];
                        let up = &g[r * per_row..(r + 1) * per_row];
                        for (&j, &x) in idx.iter().zip(up) {
                            grow[j] = grow[j] + x;
                        }
                    }
                });
            }
            Op::HomogeneousDivide { input, eps } => {
                let n = node.shape[1];
                let q = &nodes[input.0].data;
                acc_in(grads, *input, &mut |gq| {
                    for i in 0..n {
                        let w = q[3 * n + i];
                        let wc = clamp_divisor(w, *eps);
                        let mut gw = T::zero();
                        for r in 0..3 {
                            gq[r * n + i] = gq[r * n + i] + g[r * n + i] / wc;
                            gw = gw - g[r * n + i] * q[r * n + i] / (wc * wc);
                        }
                        // the clamp is flat inside the band
                        if w.abs() >= *eps {
                            gq[3 * n + i] = gq[3 * n + i] + gw;
                        }
                    }
                });
            }
        }
    }
}

/// Dot product with four interleaved accumulators (fixed summation order).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let tail: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn clamp_divisor<T: Scalar>(w: T, eps: T) -> T {
    if w.abs() >= eps {
        w
    } else if w < T::zero() {
        -eps
    } else {
        eps
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *o = *o + aik * bkj;
            }
        }
    }
    out
}
