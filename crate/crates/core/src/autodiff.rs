//! Reverse-mode automatic differentiation over batched dense tensors.
//!
//! A [`Tape`] records every operation whose inputs include a tracked value.
//! [`Tape::backward`] replays the record once in reverse, summing gradient
//! contributions into each node, so a leaf used many times (a weight-tied
//! block applied at every iteration) receives the sum of its per-use
//! gradients. Values produced while recording is off, or derived only from
//! constants, carry no node and stop the backward pass; [`Var::detach`] makes
//! any value such a constant.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{numel, Tensor};

pub type NodeId = usize;

/// A value flowing through a tape. Cheap to clone; the buffer is shared.
#[derive(Clone, Debug)]
pub struct Var<T> {
    node: Option<NodeId>,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Var<T> {
    /// An untracked value.
    pub fn constant(tensor: &Tensor<T>) -> Self {
        Self {
            node: None,
            shape: tensor.shape().to_vec(),
            data: Arc::new(tensor.data().to_vec()),
        }
    }

    pub fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("var", format!("{:?} vs {}", shape, data.len())));
        }
        Ok(Self {
            node: None,
            shape,
            data: Arc::new(data),
        })
    }

    /// Same values, no backward edges.
    pub fn detach(&self) -> Self {
        Self {
            node: None,
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.as_ref().clone()).expect("var shape is consistent")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Sub {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Vec<T>>,
        bv: Arc<Vec<T>>,
    },
    Scale {
        a: NodeId,
        c: T,
    },
    Lerp {
        z: Option<NodeId>,
        f: Option<NodeId>,
        lambda: T,
    },
    /// `b` broadcast over the leading repeats of `a`.
    AddBroadcast {
        a: Option<NodeId>,
        b: Option<NodeId>,
        inner: usize,
    },
    Gelu {
        a: NodeId,
        x: Arc<Vec<T>>,
    },
    MatMul {
        a: Option<NodeId>,
        w: Option<NodeId>,
        av: Arc<Vec<T>>,
        wv: Arc<Vec<T>>,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Vec<T>>,
        bv: Arc<Vec<T>>,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SwapAxes {
        a: NodeId,
        out_shape: Vec<usize>,
        i: usize,
        j: usize,
    },
    Reshape {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        y: Arc<Vec<T>>,
        n: usize,
    },
    RmsNorm {
        a: NodeId,
        y: Arc<Vec<T>>,
        inv_rms: Vec<T>,
        d: usize,
    },
    Embedding {
        table: NodeId,
        tokens: Vec<usize>,
        width: usize,
    },
    MeanAxis1 {
        a: NodeId,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Sum {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        vocab: usize,
    },
    Bce {
        q: NodeId,
        probs: Vec<T>,
        labels: Vec<T>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    len: usize,
}

/// Operation record for one optimizer interval.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the loss with respect to the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&[T]> {
        var.node
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }
}

fn acc_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c: T = cast(0.797_884_560_802_865_4);
    let k: T = cast(0.044_715);
    let half: T = cast(0.5);
    let one = T::one();
    let three: T = cast(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh_fast();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
    (y, dy)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Copies `data` (laid out as `shape`) into a buffer with axes `i` and `j` swapped.
fn swap_axes_data<T: Scalar>(data: &[T], shape: &[usize], i: usize, j: usize) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(i, j);
    let in_strides = strides(shape);
    let mut src_strides = in_strides.clone();
    src_strides.swap(i, j);
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(a, b)| a * b).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            consumed: Cell::new(false),
        }
    }

    /// A tape that never records; for pure evaluation.
    pub fn frozen() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Runs `f` with recording disabled; everything it produces is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    fn push(&self, op: Op<T>, len: usize) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        nodes.len() - 1
    }

    fn out(&self, shape: Vec<usize>, data: Vec<T>, make: impl FnOnce() -> Option<Op<T>>) -> Var<T> {
        let node = if self.recording.get() {
            make().map(|op| self.push(op, data.len()))
        } else {
            None
        };
        Var {
            node,
            shape,
            data: Arc::new(data),
        }
    }

    fn any_tracked(&self, ids: &[Option<NodeId>]) -> bool {
        self.recording.get() && ids.iter().any(Option::is_some)
    }

    /// Registers a tensor as a leaf. Tracked only when it requires grad.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<T> {
        let data = tensor.data().to_vec();
        let node = if tensor.requires_grad && self.recording.get() {
            Some(self.push(Op::Leaf, data.len()))
        } else {
            None
        };
        Var {
            node,
            shape: tensor.shape().to_vec(),
            data: Arc::new(data),
        }
    }

    fn same_shape(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("add", a, b)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x + y).collect();
        let (an, bn) = (a.node, b.node);
        let tracked = self.any_tracked(&[an, bn]);
        Ok(self.out(a.shape.clone(), data, || tracked.then_some(Op::Add { a: an, b: bn })))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("sub", a, b)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x - y).collect();
        let (an, bn) = (a.node, b.node);
        let tracked = self.any_tracked(&[an, bn]);
        Ok(self.out(a.shape.clone(), data, || tracked.then_some(Op::Sub { a: an, b: bn })))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("mul", a, b)?;
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect();
        let (an, bn) = (a.node, b.node);
        let tracked = self.any_tracked(&[an, bn]);
        Ok(self.out(a.shape.clone(), data, || {
            tracked.then(|| Op::Mul {
                a: an,
                b: bn,
                av: Arc::clone(&a.data),
                bv: Arc::clone(&b.data),
            })
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        let data = a.data.iter().map(|&x| x * c).collect();
        let an = a.node;
        self.out(a.shape.clone(), data, || an.map(|a| Op::Scale { a, c }))
    }

    /// `lambda·z + (1 − lambda)·f`, i.e. `z + (1 − lambda)(f − z)`. Exact at
    /// `lambda = 0` (returns `f`) and `lambda = 1` (returns `z`).
    pub fn lerp(&self, z: &Var<T>, f: &Var<T>, lambda: T) -> Result<Var<T>> {
        Self::same_shape("lerp", z, f)?;
        let keep = T::one() - lambda;
        let data = z
            .data
            .iter()
            .zip(f.data.iter())
            .map(|(&zv, &fv)| lambda * zv + keep * fv)
            .collect();
        let (zn, fnode) = (z.node, f.node);
        let tracked = self.any_tracked(&[zn, fnode]);
        Ok(self.out(z.shape.clone(), data, || {
            tracked.then_some(Op::Lerp {
                z: zn,
                f: fnode,
                lambda,
            })
        }))
    }

    /// Adds `b` to every trailing block of `a`; `b.shape` must be a suffix of `a.shape`.
    pub fn add_broadcast(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let r = b.shape.len();
        if r > a.shape.len() || a.shape[a.shape.len() - r..] != b.shape[..] {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} + {:?}", a.shape, b.shape),
            ));
        }
        let inner = b.data.len();
        let mut data = a.data.as_ref().clone();
        for chunk in data.chunks_mut(inner.max(1)) {
            add_into(chunk, &b.data);
        }
        let (an, bn) = (a.node, b.node);
        let tracked = self.any_tracked(&[an, bn]);
        Ok(self.out(a.shape.clone(), data, || {
            tracked.then_some(Op::AddBroadcast { a: an, b: bn, inner })
        }))
    }

    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let data = a.data.iter().map(|&x| gelu_parts(x).0).collect();
        let an = a.node;
        self.out(a.shape.clone(), data, || {
            an.map(|id| Op::Gelu {
                a: id,
                x: Arc::clone(&a.data),
            })
        })
    }

    /// `a[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&self, a: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        if w.shape.len() != 2 || a.shape.is_empty() || *a.shape.last().unwrap() != w.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, w.shape)));
        }
        let (k, n) = (w.shape[0], w.shape[1]);
        let m = a.data.len() / k.max(1);
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            m, k, n, T::one(), &a.data, k as isize, 1, &w.data, n as isize, 1, T::zero(), &mut data,
            n as isize, 1,
        );
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = n;
        let (an, wn) = (a.node, w.node);
        let tracked = self.any_tracked(&[an, wn]);
        Ok(self.out(shape, data, || {
            tracked.then(|| Op::MatMul {
                a: an,
                w: wn,
                av: Arc::clone(&a.data),
                wv: Arc::clone(&w.data),
                m,
                k,
                n,
            })
        }))
    }

    /// Batched product over the leading axis: `[g, m, k] · [g, k, n]`, or
    /// `[g, m, k] · [g, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", a.shape, b.shape)));
        }
        let (groups, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
        let (bk, n) = if trans_b {
            (b.shape[2], b.shape[1])
        } else {
            (b.shape[1], b.shape[2])
        };
        if bk != k {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", a.shape, b.shape)));
        }
        let mut data = vec![T::zero(); groups * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for g in 0..groups {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data[g * m * k..(g + 1) * m * k],
                k as isize,
                1,
                &b.data[g * k * n..(g + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut data[g * m * n..(g + 1) * m * n],
                n as isize,
                1,
            );
        }
        let (an, bn) = (a.node, b.node);
        let tracked = self.any_tracked(&[an, bn]);
        Ok(self.out(vec![groups, m, n], data, || {
            tracked.then(|| Op::BatchMatMul {
                a: an,
                b: bn,
                av: Arc::clone(&a.data),
                bv: Arc::clone(&b.data),
                groups,
                m,
                k,
                n,
                trans_b,
            })
        }))
    }

    pub fn swap_axes(&self, a: &Var<T>, i: usize, j: usize) -> Result<Var<T>> {
        if i >= a.shape.len() || j >= a.shape.len() {
            return Err(Error::shape("swap_axes", format!("{:?} ({i},{j})", a.shape)));
        }
        let (data, out_shape) = swap_axes_data(&a.data, &a.shape, i, j);
        let an = a.node;
        let os = out_shape.clone();
        Ok(self.out(out_shape, data, || {
            an.map(|id| Op::SwapAxes {
                a: id,
                out_shape: os,
                i,
                j,
            })
        }))
    }

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != a.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", a.shape, shape)));
        }
        let node = match a.node {
            Some(id) if self.recording.get() => Some(self.push(Op::Reshape { a: id }, a.data.len())),
            _ => None,
        };
        Ok(Var {
            node,
            shape: shape.to_vec(),
            data: Arc::clone(&a.data),
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: &Var<T>) -> Var<T> {
        let n = *a.shape.last().unwrap_or(&1);
        let mut data = a.data.as_ref().clone();
        for row in data.chunks_mut(n.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = Arc::new(data);
        let an = a.node;
        let node = match an {
            Some(id) if self.recording.get() => Some(self.push(
                Op::Softmax {
                    a: id,
                    y: Arc::clone(&y),
                    n,
                },
                y.len(),
            )),
            _ => None,
        };
        Var {
            node,
            shape: a.shape.clone(),
            data: y,
        }
    }

    /// Divides each last-axis slice by `sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&self, a: &Var<T>, eps: T) -> Var<T> {
        let d = *a.shape.last().unwrap_or(&1);
        let dt: T = cast(d as f64);
        let mut data = a.data.as_ref().clone();
        let mut inv_rms = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d.max(1)) {
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / dt;
            let r = T::one() / (ms + eps).sqrt();
            for v in row.iter_mut() {
                *v = *v * r;
            }
            inv_rms.push(r);
        }
        let y = Arc::new(data);
        let node = match a.node {
            Some(id) if self.recording.get() => Some(self.push(
                Op::RmsNorm {
                    a: id,
                    y: Arc::clone(&y),
                    inv_rms,
                    d,
                },
                y.len(),
            )),
            _ => None,
        };
        Var {
            node,
            shape: a.shape.clone(),
            data: y,
        }
    }

    /// Row lookup `table[tokens[i]]`, giving `[tokens.len(), width]`.
    pub fn embedding(&self, table: &Var<T>, tokens: &[usize]) -> Result<Var<T>> {
        if table.shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", table.shape)));
        }
        let (rows, width) = (table.shape[0], table.shape[1]);
        let mut data = Vec::with_capacity(tokens.len() * width);
        for &t in tokens {
            if t >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: t,
                    bound: rows,
                });
            }
            data.extend_from_slice(&table.data[t * width..(t + 1) * width]);
        }
        let tn = table.node;
        Ok(self.out(vec![tokens.len(), width], data, || {
            tn.map(|id| Op::Embedding {
                table: id,
                tokens: tokens.to_vec(),
                width,
            })
        }))
    }

    /// Mean over axis 1 of `[outer, mid, inner]`, giving `[outer, inner]`.
    pub fn mean_axis1(&self, a: &Var<T>) -> Result<Var<T>> {
        if a.shape.len() != 3 {
            return Err(Error::shape("mean_axis1", format!("{:?}", a.shape)));
        }
        let (outer, mid, inner) = (a.shape[0], a.shape[1], a.shape[2]);
        let inv: T = cast(1.0 / mid as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for s in 0..mid {
                let base = (o * mid + s) * inner;
                add_into(dst, &a.data[base..base + inner]);
            }
            dst.iter_mut().for_each(|v| *v = *v * inv);
        }
        let an = a.node;
        Ok(self.out(vec![outer, inner], data, || {
            an.map(|id| Op::MeanAxis1 {
                a: id,
                outer,
                mid,
                inner,
            })
        }))
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let s = a.data.iter().fold(T::zero(), |s, &v| s + v);
        let an = a.node;
        self.out(vec![], vec![s], || an.map(|id| Op::Sum { a: id }))
    }

    /// `Σ_i weights[i] · (−log softmax(logits[i])[targets[i]])` for logits `[n, vocab]`.
    pub fn cross_entropy_weighted(
        &self,
        logits: &Var<T>,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var<T>> {
        let vocab = *logits.shape.last().unwrap_or(&0);
        let n = logits.data.len() / vocab.max(1);
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let mut probs = Vec::with_capacity(n * vocab);
        let mut loss = T::zero();
        for (i, row) in logits.data.chunks(vocab).enumerate() {
            let t = targets[i];
            if t >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    bound: vocab,
                });
            }
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s = row.iter().fold(T::zero(), |s, &v| s + (v - mx).exp());
            let lse = mx + s.ln();
            loss = loss + weights[i] * (lse - row[t]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let ln = logits.node;
        Ok(self.out(vec![], vec![loss], || {
            ln.map(|id| Op::CrossEntropy {
                logits: id,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                vocab,
            })
        }))
    }

    /// Mean over rows of the softmax cross-entropy of `logits[n, vocab]`.
    pub fn softmax_cross_entropy(&self, logits: &Var<T>, targets: &[usize]) -> Result<Var<T>> {
        let w: T = cast(1.0 / targets.len().max(1) as f64);
        self.cross_entropy_weighted(logits, targets, &vec![w; targets.len()])
    }

    /// `Σ_i weights[i] · BCE(σ(q[i]), labels[i])`, stabilized through softplus.
    pub fn bce_with_logits_weighted(&self, q: &Var<T>, labels: &[T], weights: &[T]) -> Result<Var<T>> {
        if labels.len() != q.data.len() || weights.len() != q.data.len() {
            return Err(Error::shape(
                "bce",
                format!("{} logits, {} labels, {} weights", q.data.len(), labels.len(), weights.len()),
            ));
        }
        let mut loss = T::zero();
        let mut probs = Vec::with_capacity(labels.len());
        for ((&x, &y), &w) in q.data.iter().zip(labels).zip(weights) {
            // softplus(x) − x·y = max(x,0) − x·y + log(1 + e^{−|x|})
            let l = x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p();
            loss = loss + w * l;
            probs.push(T::one() / (T::one() + (-x).exp()));
        }
        let qn = q.node;
        Ok(self.out(vec![], vec![loss], || {
            qn.map(|id| Op::Bce {
                q: id,
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            })
        }))
    }

    /// Binary cross-entropy of a single halting logit against a 0/1 label.
    pub fn binary_cross_entropy_with_logit(&self, q: &Var<T>, label: bool) -> Result<Var<T>> {
        let y = if label { T::one() } else { T::zero() };
        self.bce_with_logits_weighted(q, &[y], &[T::one()])
    }

    /// Replays the record in reverse from `loss`. Consumes the tape.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::TapeReuse);
        }
        let root = match loss.node {
            Some(id) if loss.data.len() == 1 => id,
            _ => return Err(Error::NotScalar),
        };
        self.consumed.set(true);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            Self::propagate(&nodes, &mut grads, &nodes[i].op, &g);
        }

        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], op: &Op<T>, g: &[T]) {
        let len = |id: NodeId| nodes[id].len;
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for id in [a, b].into_iter().flatten() {
                    add_into(acc_buf(grads, *id, len(*id)), g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(id) = a {
                    add_into(acc_buf(grads, *id, len(*id)), g);
                }
                if let Some(id) = b {
                    let buf = acc_buf(grads, *id, len(*id));
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::Mul { a, b, av, bv } => {
                if let Some(id) = a {
                    let buf = acc_buf(grads, *id, len(*id));
                    for ((d, &gv), &o) in buf.iter_mut().zip(g).zip(bv.iter()) {
                        *d = *d + gv * o;
                    }
                }
                if let Some(id) = b {
                    let buf = acc_buf(grads, *id, len(*id));
                    for ((d, &gv), &o) in buf.iter_mut().zip(g).zip(av.iter()) {
                        *d = *d + gv * o;
                    }
                }
            }
            Op::Scale { a, c } => {
                let buf = acc_buf(grads, *a, len(*a));
                buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * *c);
            }
            Op::Lerp { z, f, lambda } => {
                if let Some(id) = z {
                    let buf = acc_buf(grads, *id, len(*id));
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * *lambda);
                }
                if let Some(id) = f {
                    let keep = T::one() - *lambda;
                    let buf = acc_buf(grads, *id, len(*id));
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * keep);
                }
            }
            Op::AddBroadcast { a, b, inner } => {
                if let Some(id) = a {
                    add_into(acc_buf(grads, *id, len(*id)), g);
                }
                if let Some(id) = b {
                    let buf = acc_buf(grads, *id, len(*id));
                    for chunk in g.chunks((*inner).max(1)) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Gelu { a, x } => {
                let buf = acc_buf(grads, *a, len(*a));
                for ((d, &gv), &xv) in buf.iter_mut().zip(g).zip(x.iter()) {
                    *d = *d + gv * gelu_parts(xv).1;
                }
            }
            Op::MatMul {
                a,
                w,
                av,
                wv,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(id) = a {
                    // da = g · wᵀ
                    let buf = acc_buf(grads, *id, len(*id));
                    T::gemm(
                        m, n, k, T::one(), g, n as isize, 1, wv, 1, n as isize, T::one(), buf,
                        k as isize, 1,
                    );
                }
                if let Some(id) = w {
                    // dw = aᵀ · g
                    let buf = acc_buf(grads, *id, len(*id));
                    T::gemm(
                        k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), buf,
                        n as isize, 1,
                    );
                }
            }
            Op::BatchMatMul {
                a,
                b,
                av,
                bv,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(id) = a {
                    let buf = acc_buf(grads, *id, len(*id));
                    for gi in 0..*groups {
                        let gs = &g[gi * m * n..(gi + 1) * m * n];
                        let bs = &bv[gi * k * n..(gi + 1) * k * n];
                        let ds = &mut buf[gi * m * k..(gi + 1) * m * k];
                        // da = g · bᵀ  (b: [k,n])  or  g · b  (b: [n,k])
                        let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(m, n, k, T::one(), gs, n as isize, 1, bs, rs, cs, T::one(), ds, k as isize, 1);
                    }
                }
                if let Some(id) = b {
                    let buf = acc_buf(grads, *id, len(*id));
                    for gi in 0..*groups {
                        let gs = &g[gi * m * n..(gi + 1) * m * n];
                        let as_ = &av[gi * m * k..(gi + 1) * m * k];
                        let ds = &mut buf[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // db[n,k] = gᵀ · a
                            T::gemm(n, m, k, T::one(), gs, 1, n as isize, as_, k as isize, 1, T::one(), ds, k as isize, 1);
                        } else {
                            // db[k,n] = aᵀ · g
                            T::gemm(k, m, n, T::one(), as_, 1, k as isize, gs, n as isize, 1, T::one(), ds, n as isize, 1);
                        }
                    }
                }
            }
            Op::SwapAxes { a, out_shape, i, j } => {
                let (back, _) = swap_axes_data(g, out_shape, *i, *j);
                add_into(acc_buf(grads, *a, len(*a)), &back);
            }
            Op::Reshape { a } => add_into(acc_buf(grads, *a, len(*a)), g),
            Op::Softmax { a, y, n } => {
                let buf = acc_buf(grads, *a, len(*a));
                for ((d, gr), yr) in buf.chunks_mut(*n).zip(g.chunks(*n)).zip(y.chunks(*n)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for ((dv, &gv), &yv) in d.iter_mut().zip(gr).zip(yr) {
                        *dv = *dv + yv * (gv - dot);
                    }
                }
            }
            Op::RmsNorm { a, y, inv_rms, d } => {
                let dt: T = cast(*d as f64);
                let buf = acc_buf(grads, *a, len(*a));
                for (((dr, gr), yr), &r) in buf
                    .chunks_mut(*d)
                    .zip(g.chunks(*d))
                    .zip(y.chunks(*d))
                    .zip(inv_rms)
                {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b) / dt;
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = *dv + r * (gv - yv * dot);
                    }
                }
            }
            Op::Embedding {
                table,
                tokens,
                width,
            } => {
                let buf = acc_buf(grads, *table, len(*table));
                for (i, &t) in tokens.iter().enumerate() {
                    add_into(&mut buf[t * width..(t + 1) * width], &g[i * width..(i + 1) * width]);
                }
            }
            Op::MeanAxis1 {
                a,
                outer,
                mid,
                inner,
            } => {
                let inv: T = cast(1.0 / *mid as f64);
                let buf = acc_buf(grads, *a, len(*a));
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for s in 0..*mid {
                        let base = (o * mid + s) * inner;
                        for (dv, &gv) in buf[base..base + inner].iter_mut().zip(src) {
                            *dv = *dv + gv * inv;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let buf = acc_buf(grads, *a, len(*a));
                buf.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
                vocab,
            } => {
                let buf = acc_buf(grads, *logits, len(*logits));
                for (i, (dr, pr)) in buf.chunks_mut(*vocab).zip(probs.chunks(*vocab)).enumerate() {
                    let w = g[0] * weights[i];
                    for (dv, &p) in dr.iter_mut().zip(pr) {
                        *dv = *dv + w * p;
                    }
                    dr[targets[i]] = dr[targets[i]] - w;
                }
            }
            Op::Bce {
                q,
                probs,
                labels,
                weights,
            } => {
                let buf = acc_buf(grads, *q, len(*q));
                for (((dv, &p), &y), &w) in buf.iter_mut().zip(probs).zip(labels).zip(weights) {
                    *dv = *dv + g[0] * w * (p - y);
                }
            }
        }
    }
}
