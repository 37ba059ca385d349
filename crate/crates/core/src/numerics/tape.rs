//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each primitive appends one node holding its output value, the handles of
//! its inputs, and whatever forward intermediates its backward rule needs.
//! Nodes are only ever appended, so every input precedes its consumer and a
//! single reverse sweep produces all gradients.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::activation::Activation;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward quantizer used by the straight-through node.
///
/// Returns the quantized tensor and a per-element mask: `true` where the
/// incoming gradient passes through, `false` where it is zeroed.
pub trait FakeQuantizer<T>: Send + Sync {
    fn fake_quant(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)>;
}

/// Token layout for masked attention: rows are `batch * seq_len` tokens and
/// each token carries a segment id; a query attends to keys of the same
/// sequence and segment at positions not after its own.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub seq_len: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub segments: Arc<Vec<u32>>,
}

/// Supervision for one row of the sparse distillation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTarget {
    pub label: u32,
    /// Teacher support (vocabulary ids) and stored, unnormalized probabilities.
    pub teacher: Option<(Vec<u32>, Vec<f32>)>,
}

/// Per-row decomposition of the mixed loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdRow<T> {
    pub loss: T,
    pub kl: T,
    pub ce: T,
}

/// Mean KL and CE terms of a [`Tape::sparse_kd`] node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KdTerms {
    pub kl: f64,
    pub ce: f64,
    pub rows: usize,
}

/// Mixed sparse-KL / cross-entropy loss of a single logit row.
///
/// One log-softmax evaluation feeds both terms. The teacher probabilities
/// are renormalized over their support before the KL is taken.
pub fn sparse_kd_row<T: Scalar>(
    logits: &[T],
    target: &SparseTarget,
    lambda: f64,
) -> Result<KdRow<T>> {
    let lse = log_sum_exp(logits);
    let label = target.label as usize;
    if label >= logits.len() {
        return Err(Error::TokenOutOfRange {
            token: target.label,
            vocab: logits.len(),
        });
    }
    let ce = lse - logits[label];
    let kl = match &target.teacher {
        Some((idx, probs)) => {
            let mass: T = probs.iter().map(|&p| T::of(p as f64)).sum();
            if !(mass > T::zero()) {
                return Err(Error::ZeroMass);
            }
            let mut kl = T::zero();
            for (&i, &p) in idx.iter().zip(probs) {
                let pt = T::of(p as f64) / mass;
                if pt > T::zero() {
                    kl += pt * (pt.ln() - (logits[i as usize] - lse));
                }
            }
            kl
        }
        None if lambda > 0.0 => {
            return Err(Error::InvalidArgument(
                "distillation weight > 0 needs teacher probabilities".into(),
            ))
        }
        None => T::zero(),
    };
    let lam = T::of(lambda);
    Ok(KdRow {
        loss: lam * kl + (T::one() - lam) * ce,
        kl,
        ce,
    })
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Linear { x: Var, w: Var },
    MatMul { a: Var, b: Var },
    Columns { x: Var, start: usize, width: usize },
    SoftmaxRows(Var),
    LogSoftmaxGather { x: Var, targets: Arc<Vec<usize>> },
    RmsNorm { x: Var, gain: Var, eps: T },
    Rope { x: Var, head_dim: usize, positions: Arc<Vec<usize>>, base: f64 },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout },
    Activation { x: Var, act: Activation },
    Embedding { table: Var, ids: Arc<Vec<u32>> },
    Sum(Var),
    Mean(Var),
    SparseKd { logits: Var, targets: Arc<Vec<Option<SparseTarget>>>, lambda: f64 },
    FakeQuant { x: Var, quantizer: Arc<dyn FakeQuantizer<T>> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Columns { .. } => "columns",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxGather { .. } => "log_softmax_gather",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
            Op::Activation { .. } => "activation",
            Op::Embedding { .. } => "embedding",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SparseKd { .. } => "sparse_kd",
            Op::FakeQuant { .. } => "fake_quant",
        }
    }
}

/// Forward intermediates kept for the backward rule.
#[derive(Clone)]
enum Aux<T> {
    None,
    /// Per-row reciprocal RMS.
    InvRms(Vec<T>),
    /// Per-row log-sum-exp.
    Lse(Vec<T>),
    /// Attention probabilities `[batch, q_heads, seq, seq]`.
    Probs(Vec<T>),
    /// Full student softmax and loss decomposition.
    Kd { probs: Vec<T>, terms: KdTerms },
    Mask(Vec<bool>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    aux: Aux<T>,
}

/// Linear record of primitive applications.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Loss decomposition recorded by a [`Tape::sparse_kd`] node.
    pub fn kd_terms(&self, v: Var) -> Option<KdTerms> {
        match &self.nodes[v.0].aux {
            Aux::Kd { terms, .. } => Some(*terms),
            _ => None,
        }
    }

    /// Gradient-pass mask recorded by a [`Tape::fake_quant`] node.
    pub fn pass_mask(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].aux {
            Aux::Mask(m) => Some(m),
            _ => None,
        }
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            aux: Aux::None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    /// `x [n, in] * w[out, in]^T -> [n, out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.push(Op::Linear { x, w })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b })
    }

    /// Column slice `x[:, start..start + width]`.
    pub fn columns(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        self.push(Op::Columns { x, start, width })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(x))
    }

    /// `log softmax(x)[r, targets[r]]` for every row.
    pub fn log_softmax_gather(&mut self, x: Var, targets: Vec<usize>) -> Result<Var> {
        self.push(Op::LogSoftmaxGather {
            x,
            targets: Arc::new(targets),
        })
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        self.push(Op::RmsNorm { x, gain, eps })
    }

    /// Rotary embedding over consecutive heads of width `head_dim`, rotating
    /// the two halves of each head by `position * base^(-2i/head_dim)`.
    pub fn rope(
        &mut self,
        x: Var,
        head_dim: usize,
        positions: Arc<Vec<usize>>,
        base: f64,
    ) -> Result<Var> {
        self.push(Op::Rope {
            x,
            head_dim,
            positions,
            base,
        })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        self.push(Op::Attention { q, k, v, layout })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        self.push(Op::Activation { x, act })
    }

    pub fn embedding(&mut self, table: Var, ids: Arc<Vec<u32>>) -> Result<Var> {
        self.push(Op::Embedding { table, ids })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    /// Mean over supervised rows of `lambda * KL + (1 - lambda) * CE`.
    /// Rows whose target is `None` are excluded.
    pub fn sparse_kd(
        &mut self,
        logits: Var,
        targets: Arc<Vec<Option<SparseTarget>>>,
        lambda: f64,
    ) -> Result<Var> {
        self.push(Op::SparseKd {
            logits,
            targets,
            lambda,
        })
    }

    /// Quantize-dequantize with a straight-through backward.
    pub fn fake_quant(&mut self, x: Var, quantizer: Arc<dyn FakeQuantizer<T>>) -> Result<Var> {
        self.push(Op::FakeQuant { x, quantizer })
    }

    fn eval(&self, op: &Op<T>) -> Result<(Tensor<T>, Aux<T>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are recorded directly"),
            Op::Add(a, b) => {
                let (a, b) = (val(a), val(b));
                same_shape("add", a, b)?;
                let mut out = a.clone();
                out.axpy(T::one(), b);
                (out, Aux::None)
            }
            Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                same_shape("mul", a, b)?;
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
                (Tensor::from_vec(a.shape(), data)?, Aux::None)
            }
            Op::Scale(a, c) => (val(a).map(|x| x * *c), Aux::None),
            Op::Linear { x, w } => {
                let (x, w) = (val(x), val(w));
                let (n, din) = matrix("linear", x)?;
                let (dout, win) = matrix("linear", w)?;
                if din != win {
                    return Err(Error::shape("linear", format!("x {n}x{din} vs w {dout}x{win}")));
                }
                let mut out = Tensor::zeros(&[n, dout]);
                T::gemm(
                    n, din, dout, T::one(), x.data(), din as isize, 1, w.data(), 1, din as isize,
                    T::zero(), out.data_mut(), dout as isize, 1,
                );
                (out, Aux::None)
            }
            Op::MatMul { a, b } => {
                let (a, b) = (val(a), val(b));
                let (m, k) = matrix("matmul", a)?;
                let (k2, n) = matrix("matmul", b)?;
                if k != k2 {
                    return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
                }
                let mut out = Tensor::zeros(&[m, n]);
                T::gemm(
                    m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1,
                    T::zero(), out.data_mut(), n as isize, 1,
                );
                (out, Aux::None)
            }
            Op::Columns { x, start, width } => {
                let x = val(x);
                let (n, c) = matrix("columns", x)?;
                if start + width > c {
                    return Err(Error::shape("columns", format!("{start}+{width} > {c}")));
                }
                let mut out = Vec::with_capacity(n * width);
                for r in 0..n {
                    out.extend_from_slice(&x.row(r)[*start..start + width]);
                }
                (Tensor::from_vec(&[n, *width], out)?, Aux::None)
            }
            Op::SoftmaxRows(x) => {
                let x = val(x);
                let mut out = x.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                (out, Aux::None)
            }
            Op::LogSoftmaxGather { x, targets } => {
                let x = val(x);
                if targets.len() != x.rows() {
                    return Err(Error::shape("log_softmax_gather", "one target per row"));
                }
                let mut lse = Vec::with_capacity(x.rows());
                let mut out = Vec::with_capacity(x.rows());
                for (r, &t) in targets.iter().enumerate() {
                    let row = x.row(r);
                    if t >= row.len() {
                        return Err(Error::shape("log_softmax_gather", "target out of range"));
                    }
                    let l = log_sum_exp(row);
                    lse.push(l);
                    out.push(row[t] - l);
                }
                (Tensor::from_vec(&[x.rows()], out)?, Aux::Lse(lse))
            }
            Op::RmsNorm { x, gain, eps } => {
                let (x, g) = (val(x), val(gain));
                let d = x.cols();
                if g.len() != d {
                    return Err(Error::shape("rms_norm", format!("gain {} vs width {d}", g.len())));
                }
                let mut out = x.clone();
                let mut inv = Vec::with_capacity(x.rows());
                for r in 0..x.rows() {
                    let row = out.row_mut(r);
                    let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of_usize(d);
                    let ir = T::one() / (ms + *eps).sqrt();
                    for (v, &gg) in row.iter_mut().zip(g.data()) {
                        *v = *v * ir * gg;
                    }
                    inv.push(ir);
                }
                (out, Aux::InvRms(inv))
            }
            Op::Rope {
                x,
                head_dim,
                positions,
                base,
            } => {
                let mut out = val(x).clone();
                rope_rotate(&mut out, *head_dim, positions, *base, false)?;
                (out, Aux::None)
            }
            Op::Attention { q, k, v, layout } => {
                let (out, probs) = attention_forward(val(q), val(k), val(v), layout)?;
                (out, Aux::Probs(probs))
            }
            Op::Activation { x, act } => (val(x).map(|v| act.value(v)), Aux::None),
            Op::Embedding { table, ids } => {
                let table = val(table);
                let (vocab, d) = matrix("embedding", table)?;
                let mut out = Tensor::zeros(&[ids.len(), d]);
                for (r, &id) in ids.iter().enumerate() {
                    if id as usize >= vocab {
                        return Err(Error::TokenOutOfRange { token: id, vocab });
                    }
                    out.row_mut(r).copy_from_slice(table.row(id as usize));
                }
                (out, Aux::None)
            }
            Op::Sum(x) => (Tensor::scalar(val(x).sum()), Aux::None),
            Op::Mean(x) => {
                let x = val(x);
                if x.is_empty() {
                    return Err(Error::Empty("mean of an empty tensor"));
                }
                (Tensor::scalar(x.sum() / T::of_usize(x.len())), Aux::None)
            }
            Op::SparseKd {
                logits,
                targets,
                lambda,
            } => {
                let z = val(logits);
                if targets.len() != z.rows() {
                    return Err(Error::shape("sparse_kd", "one target slot per logit row"));
                }
                let mut probs = vec![T::zero(); z.len()];
                let (mut loss, mut kl, mut ce) = (T::zero(), 0.0, 0.0);
                let mut rows = 0usize;
                for (r, target) in targets.iter().enumerate() {
                    let Some(target) = target else { continue };
                    let row = z.row(r);
                    let k = sparse_kd_row(row, target, *lambda)?;
                    loss += k.loss;
                    kl += k.kl.as_f64();
                    ce += k.ce.as_f64();
                    rows += 1;
                    let p = &mut probs[r * z.cols()..(r + 1) * z.cols()];
                    p.copy_from_slice(row);
                    softmax_in_place(p);
                }
                if rows == 0 {
                    return Err(Error::Empty("no supervised rows in sparse_kd"));
                }
                let n = rows as f64;
                let terms = KdTerms {
                    kl: kl / n,
                    ce: ce / n,
                    rows,
                };
                (
                    Tensor::scalar(loss / T::of_usize(rows)),
                    Aux::Kd { probs, terms },
                )
            }
            Op::FakeQuant { x, quantizer } => {
                let x = val(x);
                let (out, mask) = quantizer.fake_quant(x)?;
                if out.shape() != x.shape() || mask.len() != x.len() {
                    return Err(Error::shape("fake_quant", "quantizer changed the shape"));
                }
                (out, Aux::Mask(mask))
            }
        })
    }

    /// Re-executes every primitive from the recorded leaves.
    pub fn replay(&self) -> Result<Tape<T>> {
        let mut out = Tape::new();
        for node in &self.nodes {
            match node.op {
                Op::Leaf => {
                    out.leaf(node.value.clone());
                }
                ref op => {
                    out.push(op.clone())?;
                }
            }
        }
        Ok(out)
    }

    /// Bitwise comparison of every node value.
    pub fn values_bit_eq(&self, other: &Tape<T>) -> bool {
        self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| a.value.bit_eq(&b.value))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let name = node.op.name();
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor<T>)| -> Result<()> {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot);
            if !slot.is_finite() {
                return Err(Error::NonFinite { op: name });
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |t| t.axpy(T::one(), g))?;
                acc(*b, &mut |t| t.axpy(T::one(), g))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).clone(), val(b).clone());
                acc(*a, &mut |t| {
                    for ((o, &gg), &y) in t.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gg * y;
                    }
                })?;
                acc(*b, &mut |t| {
                    for ((o, &gg), &x) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gg * x;
                    }
                })?;
            }
            Op::Scale(a, c) => acc(*a, &mut |t| t.axpy(*c, g))?,
            Op::Linear { x, w } => {
                let (xv, wv) = (val(x), val(w));
                let (n, din) = (xv.rows(), xv.cols());
                let dout = wv.rows();
                acc(*x, &mut |t| {
                    T::gemm(
                        n, dout, din, T::one(), g.data(), dout as isize, 1, wv.data(), din as isize,
                        1, T::one(), t.data_mut(), din as isize, 1,
                    )
                })?;
                acc(*w, &mut |t| {
                    T::gemm(
                        dout, n, din, T::one(), g.data(), 1, dout as isize, xv.data(), din as isize,
                        1, T::one(), t.data_mut(), din as isize, 1,
                    )
                })?;
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                acc(*a, &mut |t| {
                    T::gemm(
                        m, n, k, T::one(), g.data(), n as isize, 1, bv.data(), 1, n as isize,
                        T::one(), t.data_mut(), k as isize, 1,
                    )
                })?;
                acc(*b, &mut |t| {
                    T::gemm(
                        k, m, n, T::one(), av.data(), 1, k as isize, g.data(), n as isize, 1,
                        T::one(), t.data_mut(), n as isize, 1,
                    )
                })?;
            }
            Op::Columns { x, start, width } => {
                acc(*x, &mut |t| {
                    for r in 0..g.rows() {
                        for (o, &gg) in t.row_mut(r)[*start..start + width].iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                })?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                acc(*x, &mut |t| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yy * (gg - dot);
                        }
                    }
                })?;
            }
            Op::LogSoftmaxGather { x, targets } => {
                let Aux::Lse(lse) = &node.aux else { unreachable!() };
                let xv = val(x);
                acc(*x, &mut |t| {
                    for (r, &tg) in targets.iter().enumerate() {
                        let gr = g.data()[r];
                        let row = xv.row(r);
                        let out = t.row_mut(r);
                        for (j, o) in out.iter_mut().enumerate() {
                            let p = (row[j] - lse[r]).exp();
                            let ind = if j == tg { T::one() } else { T::zero() };
                            *o += gr * (ind - p);
                        }
                    }
                })?;
            }
            Op::RmsNorm { x, gain, .. } => {
                let Aux::InvRms(inv) = &node.aux else { unreachable!() };
                let (xv, gv) = (val(x), val(gain));
                let d = xv.cols();
                let dn = T::of_usize(d);
                acc(*x, &mut |t| {
                    for r in 0..xv.rows() {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        let ir = inv[r];
                        // dot(g * gain, x_hat) / d
                        let m: T = (0..d).map(|j| gr[j] * gv.data()[j] * xr[j] * ir).sum::<T>() / dn;
                        let out = t.row_mut(r);
                        for j in 0..d {
                            out[j] += ir * (gr[j] * gv.data()[j] - xr[j] * ir * m);
                        }
                    }
                })?;
                acc(*gain, &mut |t| {
                    for r in 0..xv.rows() {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        for (j, o) in t.data_mut().iter_mut().enumerate() {
                            *o += gr[j] * xr[j] * inv[r];
                        }
                    }
                })?;
            }
            Op::Rope {
                x,
                head_dim,
                positions,
                base,
            } => {
                let mut dx = g.clone();
                rope_rotate(&mut dx, *head_dim, positions, *base, true)?;
                acc(*x, &mut |t| t.axpy(T::one(), &dx))?;
            }
            Op::Attention { q, k, v, layout } => {
                let Aux::Probs(probs) = &node.aux else { unreachable!() };
                let (dq, dk, dv) = attention_backward(val(q), val(k), val(v), layout, probs, g);
                acc(*q, &mut |t| t.axpy(T::one(), &dq))?;
                acc(*k, &mut |t| t.axpy(T::one(), &dk))?;
                acc(*v, &mut |t| t.axpy(T::one(), &dv))?;
            }
            Op::Activation { x, act } => {
                let xv = val(x);
                acc(*x, &mut |t| {
                    for ((o, &gg), &xx) in t.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gg * act.derivative(xx);
                    }
                })?;
            }
            Op::Embedding { table, ids } => {
                acc(*table, &mut |t| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gg) in t.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                })?;
            }
            Op::Sum(x) => {
                let gg = g.item();
                acc(*x, &mut |t| t.data_mut().iter_mut().for_each(|o| *o += gg))?;
            }
            Op::Mean(x) => {
                let gg = g.item() / T::of_usize(val(x).len());
                acc(*x, &mut |t| t.data_mut().iter_mut().for_each(|o| *o += gg))?;
            }
            Op::SparseKd {
                logits,
                targets,
                lambda,
            } => {
                let Aux::Kd { probs, terms } = &node.aux else { unreachable!() };
                let cols = val(logits).cols();
                let lam = T::of(*lambda);
                let scale = g.item() / T::of_usize(terms.rows);
                acc(*logits, &mut |t| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(target) = target else { continue };
                        let p = &probs[r * cols..(r + 1) * cols];
                        let out = t.row_mut(r);
                        for (o, &q) in out.iter_mut().zip(p) {
                            *o += scale * q;
                        }
                        out[target.label as usize] -= scale * (T::one() - lam);
                        if let Some((idx, tp)) = &target.teacher {
                            let mass: T = tp.iter().map(|&v| T::of(v as f64)).sum();
                            for (&i, &v) in idx.iter().zip(tp) {
                                out[i as usize] -= scale * lam * T::of(v as f64) / mass;
                            }
                        }
                    }
                })?;
            }
            Op::FakeQuant { x, .. } => {
                let Aux::Mask(mask) = &node.aux else { unreachable!() };
                acc(*x, &mut |t| {
                    for ((o, &gg), &m) in t.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        if m {
                            *o += gg;
                        }
                    }
                })?;
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn rope_rotate<T: Scalar>(
    x: &mut Tensor<T>,
    head_dim: usize,
    positions: &[usize],
    base: f64,
    inverse: bool,
) -> Result<()> {
    if head_dim == 0 || head_dim % 2 != 0 || x.cols() % head_dim != 0 {
        return Err(Error::shape("rope", format!("width {} head_dim {head_dim}", x.cols())));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape("rope", "one position per row"));
    }
    let half = head_dim / 2;
    let heads = x.cols() / head_dim;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for (r, &p) in positions.iter().enumerate() {
        let row = x.row_mut(r);
        for (i, f) in freqs.iter().enumerate() {
            let (s, c) = (p as f64 * f).sin_cos();
            let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
            for h in 0..heads {
                let o = h * head_dim;
                let (a, b) = (row[o + i], row[o + i + half]);
                row[o + i] = a * c - b * s;
                row[o + i + half] = a * s + b * c;
            }
        }
    }
    Ok(())
}

fn attention_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    l: &AttentionLayout,
) -> Result<usize> {
    let n = q.rows();
    if l.seq_len == 0 || n % l.seq_len != 0 {
        return Err(Error::shape("attention", "rows must be a multiple of seq_len"));
    }
    if l.kv_heads == 0 || l.q_heads % l.kv_heads != 0 {
        return Err(Error::shape("attention", "q_heads must be a multiple of kv_heads"));
    }
    if q.cols() != l.q_heads * l.head_dim
        || k.cols() != l.kv_heads * l.head_dim
        || v.cols() != l.kv_heads * l.head_dim
        || k.rows() != n
        || v.rows() != n
        || l.segments.len() != n
    {
        return Err(Error::shape(
            "attention",
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok(n / l.seq_len)
}

fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    l: &AttentionLayout,
) -> Result<(Tensor<T>, Vec<T>)> {
    let batch = attention_dims(q, k, v, l)?;
    let (t_len, hd) = (l.seq_len, l.head_dim);
    let group = l.q_heads / l.kv_heads;
    let scale = T::one() / T::of_usize(hd).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![T::zero(); batch * l.q_heads * t_len * t_len];
    for b in 0..batch {
        for h in 0..l.q_heads {
            let kvh = h / group;
            for i in 0..t_len {
                let qi = b * t_len + i;
                let qrow = &q.row(qi)[h * hd..(h + 1) * hd];
                let p = &mut probs[((b * l.q_heads + h) * t_len + i) * t_len..][..t_len];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = b * t_len + j;
                    *pj = if j <= i && l.segments[qi] == l.segments[kj] {
                        let krow = &k.row(kj)[kvh * hd..(kvh + 1) * hd];
                        qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale
                    } else {
                        T::MASK
                    };
                }
                softmax_in_place(p);
                let orow = &mut out.row_mut(qi)[h * hd..(h + 1) * hd];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    let vrow = &v.row(b * t_len + j)[kvh * hd..(kvh + 1) * hd];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    l: &AttentionLayout,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let batch = q.rows() / l.seq_len;
    let (t_len, hd) = (l.seq_len, l.head_dim);
    let group = l.q_heads / l.kv_heads;
    let scale = T::one() / T::of_usize(hd).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); t_len];
    for b in 0..batch {
        for h in 0..l.q_heads {
            let kvh = h / group;
            let (qs, ks) = (h * hd, kvh * hd);
            for i in 0..t_len {
                let qi = b * t_len + i;
                let p = &probs[((b * l.q_heads + h) * t_len + i) * t_len..][..t_len];
                let gout = &g.row(qi)[qs..qs + hd];
                let mut dot = T::zero();
                for j in 0..t_len {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let kj = b * t_len + j;
                    let vrow = &v.row(kj)[ks..ks + hd];
                    dp[j] = gout.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                    dot += p[j] * dp[j];
                    for (o, &gg) in dv.row_mut(kj)[ks..ks + hd].iter_mut().zip(gout) {
                        *o += p[j] * gg;
                    }
                }
                for j in 0..t_len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let kj = b * t_len + j;
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = &k.row(kj)[ks..ks + hd];
                    for (o, &kk) in dq.row_mut(qi)[qs..qs + hd].iter_mut().zip(krow) {
                        *o += ds * kk;
                    }
                    let qrow = &q.row(qi)[qs..qs + hd];
                    for (o, &qq) in dk.row_mut(kj)[ks..ks + hd].iter_mut().zip(qrow) {
                        *o += ds * qq;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
