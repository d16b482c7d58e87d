//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Tape`]. Nodes are created in
//! topological order, so [`Tape::backward`] walks the node list from the
//! loss back to index zero. Parameters are not copied onto the tape: a
//! parameter node borrows its value from the [`ParamStore`] and its
//! gradient is accumulated into a caller-supplied [`Gradients`] buffer.

use rand::Rng;

use crate::error::{DolfinError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    AddRow,
    Scale,
    SumRows,
    SumAll,
    Concat,
    StackRows,
    Row,
    Slice,
    Embedding,
    Dropout,
    SoftmaxRows,
    Relu,
    ClampMaxOne,
    Unfold,
    MaxPool,
    LstmCell,
    CrossEntropy,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    SumRows(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Slice {
        x: Var,
        start: usize,
    },
    Embedding {
        param: ParamId,
        indices: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxRows(Var),
    Relu(Var),
    ClampMaxOne(Var),
    Unfold {
        x: Var,
        window: usize,
        pad_left: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    LstmCell {
        pre: Var,
        c_prev: Var,
        gates: Vec<T>,
        tanh_c: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        gold: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::SumRows(_) => OpKind::SumRows,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Concat(_) => OpKind::Concat,
            Op::StackRows(_) => OpKind::StackRows,
            Op::Row(..) => OpKind::Row,
            Op::Slice { .. } => OpKind::Slice,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Relu(_) => OpKind::Relu,
            Op::ClampMaxOne(_) => OpKind::ClampMaxOne,
            Op::Unfold { .. } => OpKind::Unfold,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::LstmCell { .. } => OpKind::LstmCell,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    kink_trace: Option<Vec<u32>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<'static, T> {
    /// A tape with no parameter store; only leaves can carry gradients.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            kink_trace: None,
            fault: None,
        }
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            kink_trace: None,
            fault: None,
        }
    }

    /// Records the activation pattern of every relu, clamp and max-pool
    /// node. Two forward passes with equal patterns took the same
    /// piecewise-linear branch everywhere.
    pub fn trace_kinks(&mut self) {
        self.kink_trace = Some(Vec::new());
    }

    pub fn kink_pattern(&self) -> Option<&[u32]> {
        self.kink_trace.as_deref()
    }

    /// Scales the backward pass of every `kind` node by 1.5. Used only to
    /// check that gradient checking notices a broken backward.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.store.expect("parameter node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient accumulated for a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_leaf_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn store(&self) -> Result<&'p ParamStore<T>> {
        self.store
            .ok_or_else(|| DolfinError::InvalidArgument("tape has no parameter store".into()))
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Some(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), None, true)
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).dims2()?;
        let (q2, r) = self.value(b).dims2()?;
        if q != q2 {
            return Err(DolfinError::Shape(format!(
                "matmul {:?} x {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); p * r];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, p, q, r);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Some(Tensor::new(vec![p, r], out)?), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DolfinError::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Some(out), rg))
    }

    /// `a[n×k] + bias[1×k]`, the bias repeated on every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        if self.shape(bias) != [1, k] {
            return Err(DolfinError::Shape(format!(
                "add_row {:?} + {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for i in 0..n {
            for (o, &x) in out.row_mut(i).iter_mut().zip(b) {
                *o += x;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddRow(a, bias), Some(out), rg))
    }

    /// `x·w + b` for `x[n×i]`, `w[i×o]`, `b[1×o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(x);
        self.push(Op::Scale(x, s), Some(out), rg)
    }

    /// Sums over rows: `[n×d] -> [1×d]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut out = vec![T::zero(); d];
        let xv = self.value(x);
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SumRows(x), Some(Tensor::new(vec![1, d], out)?), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), Some(Tensor::scalar(s)), rg)
    }

    /// Concatenates along columns; all inputs need the same row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DolfinError::Empty("concat of zero tensors".into()));
        }
        let n = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).dims2()?;
            if r != n {
                return Err(DolfinError::Shape(format!("concat row counts {} vs {}", n, r)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        for i in 0..n {
            let mut off = 0;
            for (&x, &w) in xs.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.value(x).row(i));
                off += w;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::Concat(xs.to_vec()), Some(out), rg))
    }

    /// Stacks `[1×k]` rows into `[n×k]`.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DolfinError::Empty("stack of zero rows".into()));
        }
        let k = self.value(xs[0]).len();
        let mut data = Vec::with_capacity(k * xs.len());
        for &x in xs {
            if self.shape(x) != [1, k] {
                return Err(DolfinError::Shape(format!(
                    "stack_rows expects [1, {}], got {:?}",
                    k,
                    self.shape(x)
                )));
            }
            data.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let out = Tensor::new(vec![xs.len(), k], data)?;
        Ok(self.push(Op::StackRows(xs.to_vec()), Some(out), rg))
    }

    /// Row `i` as a `[1×k]` tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (n, _) = self.value(x).dims2()?;
        if i >= n {
            return Err(DolfinError::Shape(format!("row {} of {} rows", i, n)));
        }
        let data = self.value(x).row(i).to_vec();
        let k = data.len();
        let rg = self.rg(x);
        Ok(self.push(Op::Row(x, i), Some(Tensor::new(vec![1, k], data)?), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(DolfinError::Shape(format!(
                "slice {}..{} of {} columns",
                start,
                start + len,
                c
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Slice { x, start }, Some(Tensor::new(vec![n, len], data)?), rg))
    }

    // ---- lookups and masks --------------------------------------------

    /// Gathers rows of an embedding parameter. The backward pass scatters
    /// into the gathered rows only.
    pub fn embedding(&mut self, table: ParamId, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(DolfinError::Empty("embedding lookup of an empty sequence".into()));
        }
        let emb = self.store()?.get(table);
        let (vocab, dim) = emb.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= vocab {
                return Err(DolfinError::InvalidArgument(format!(
                    "token index {} outside vocabulary of {}",
                    ix, vocab
                )));
            }
            data.extend_from_slice(emb.row(ix));
        }
        let out = Tensor::new(vec![indices.len(), dim], data)?;
        Ok(self.push(
            Op::Embedding {
                param: table,
                indices: indices.to_vec(),
            },
            Some(out),
            true,
        ))
    }

    /// Inverted dropout. With `rng == None` (evaluation) or `rate == 0`
    /// this is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return x,
        };
        let keep = 1.0 - rate;
        let scale = T::of(1.0 / keep);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        self.push(Op::Dropout { x, mask }, Some(out), rg)
    }

    // ---- nonlinearities -----------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(DolfinError::NonFinite("softmax input".into()));
        }
        let (n, _) = xv.dims2()?;
        let mut out = xv.clone();
        for i in 0..n {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SoftmaxRows(x), Some(out), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        if self.kink_trace.is_some() {
            let bits: Vec<u32> = self.value(x).data().iter().map(|&v| (v > T::zero()) as u32).collect();
            self.kink_trace.as_mut().unwrap().extend(bits);
        }
        let rg = self.rg(x);
        self.push(Op::Relu(x), Some(out), rg)
    }

    /// Elementwise `min(1, x)`. The subgradient at exactly 1 is 1.
    pub fn clamp_max_one(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v > T::one() {
                *v = T::one();
            }
        }
        if self.kink_trace.is_some() {
            let bits: Vec<u32> = self.value(x).data().iter().map(|&v| (v <= T::one()) as u32).collect();
            self.kink_trace.as_mut().unwrap().extend(bits);
        }
        let rg = self.rg(x);
        self.push(Op::ClampMaxOne(x), Some(out), rg)
    }

    // ---- sequence ops -------------------------------------------------

    /// Unfolds `x[n×d]` into `[n × window·d]`: row `i` holds rows
    /// `i - pad_left .. i - pad_left + window` of `x`, zero outside `0..n`.
    pub fn unfold(&mut self, x: Var, window: usize, pad_left: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if n == 0 {
            return Err(DolfinError::Empty("unfold of an empty sequence".into()));
        }
        if window == 0 || pad_left >= window {
            return Err(DolfinError::InvalidArgument(format!(
                "window {} with left padding {}",
                window, pad_left
            )));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[n, window * d]);
        for i in 0..n {
            for k in 0..window {
                let src = i as isize - pad_left as isize + k as isize;
                if src >= 0 && (src as usize) < n {
                    out.row_mut(i)[k * d..(k + 1) * d].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Unfold { x, window, pad_left }, Some(out), rg))
    }

    /// Column-wise maximum over rows, `[n×k] -> [1×k]`. Ties go to the
    /// first row.
    pub fn maxpool_over_time(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        if n == 0 {
            return Err(DolfinError::Empty("max pooling over an empty sequence".into()));
        }
        let xv = self.value(x);
        let mut argmax = vec![0usize; k];
        let mut out = xv.row(0).to_vec();
        for i in 1..n {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        if let Some(trace) = self.kink_trace.as_mut() {
            trace.extend(argmax.iter().map(|&a| a as u32));
        }
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool { x, argmax }, Some(Tensor::new(vec![1, k], out)?), rg))
    }

    /// One LSTM step. `pre` is the `[1×4h]` gate pre-activation in the
    /// order input, forget, cell, output; `c_prev` is `[1×h]`. Returns
    /// `[1×2h]` holding the new hidden state followed by the new cell.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let h = self.value(c_prev).len();
        if self.value(pre).len() != 4 * h || self.shape(c_prev) != [1, h] {
            return Err(DolfinError::Shape(format!(
                "lstm_cell pre {:?} with cell {:?}",
                self.shape(pre),
                self.shape(c_prev)
            )));
        }
        let p = self.value(pre).data();
        let cp = self.value(c_prev).data();
        let mut gates = vec![T::zero(); 4 * h];
        for j in 0..h {
            gates[j] = sigmoid(p[j]);
            gates[h + j] = sigmoid(p[h + j]);
            gates[2 * h + j] = p[2 * h + j].tanh();
            gates[3 * h + j] = sigmoid(p[3 * h + j]);
        }
        let mut out = vec![T::zero(); 2 * h];
        let mut tanh_c = vec![T::zero(); h];
        for j in 0..h {
            let c = gates[h + j] * cp[j] + gates[j] * gates[2 * h + j];
            tanh_c[j] = c.tanh();
            out[j] = gates[3 * h + j] * tanh_c[j];
            out[h + j] = c;
        }
        let rg = self.rg(pre) || self.rg(c_prev);
        Ok(self.push(
            Op::LstmCell {
                pre,
                c_prev,
                gates,
                tanh_c,
            },
            Some(Tensor::new(vec![1, 2 * h], out)?),
            rg,
        ))
    }

    /// `-log softmax(logits)[gold]` for `[1×m]` logits.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let lv = self.value(logits);
        let m = lv.len();
        if gold >= m {
            return Err(DolfinError::InvalidArgument(format!(
                "gold category {} with {} logits",
                gold, m
            )));
        }
        if !lv.is_finite() {
            return Err(DolfinError::NonFinite("logits".into()));
        }
        let x = lv.data();
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = x.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let loss = log_z - x[gold];
        let probs = x.iter().map(|&v| (v - log_z).exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(Op::CrossEntropy { logits, gold, probs }, Some(Tensor::scalar(loss)), rg))
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagates from a scalar `loss`. Parameter gradients are added
    /// into `grads`, leaf gradients into the tape's own leaf buffers; both
    /// accumulate across calls.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        self.backward_scaled(loss, T::one(), Some(grads))
    }

    /// Backward for tapes without parameters.
    pub fn backward_leaves(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, T::one(), None)
    }

    /// Backward with `d loss = seed`, e.g. `1 / batch_size`.
    pub fn backward_scaled(&mut self, loss: Var, seed: T, mut grads: Option<&mut Gradients<T>>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DolfinError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::full(self.shape(loss), seed));

        for i in (0..=loss.0).rev() {
            let mut g = match node_grads[i].take() {
                Some(g) if self.nodes[i].requires_grad => g,
                _ => continue,
            };
            let node = &self.nodes[i];
            if self.fault == Some(node.op.kind()) {
                g.data_mut().iter_mut().for_each(|v| *v *= T::of(1.5));
            }
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    if self.leaf_grads.len() < self.nodes.len() {
                        self.leaf_grads.resize_with(self.nodes.len(), || None);
                    }
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
                Op::Param(id) => {
                    let buf = grads.as_deref_mut().ok_or_else(|| {
                        DolfinError::InvalidArgument("parameter reached without a gradient buffer".into())
                    })?;
                    buf.get_mut(*id).add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (p, q) = self.value(*a).dims2()?;
                    let r = self.value(*b).cols();
                    if self.rg(*a) {
                        let bv = self.value(*b).data();
                        let ga = acc_buf(&mut node_grads, *a, self.shape(*a));
                        gemm_nt_acc(gd, bv, ga, p, q, r);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).data();
                        let gb = acc_buf(&mut node_grads, *b, self.shape(*b));
                        gemm_tn_acc(av, gd, gb, p, q, r);
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.rg(x) {
                            add_into(acc_buf(&mut node_grads, x, self.shape(x)), gd);
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*a) {
                        add_into(acc_buf(&mut node_grads, *a, self.shape(*a)), gd);
                    }
                    if self.rg(*bias) {
                        let k = g.cols();
                        let gb = acc_buf(&mut node_grads, *bias, self.shape(*bias));
                        for row in gd.chunks(k) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for (o, &v) in gx.iter_mut().zip(gd) {
                        *o += v * *s;
                    }
                }
                Op::SumRows(x) => {
                    let d = g.len();
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for row in gx.chunks_mut(d) {
                        add_into(row, gd);
                    }
                }
                Op::SumAll(x) => {
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    gx.iter_mut().for_each(|o| *o += gd[0]);
                }
                Op::Concat(xs) => {
                    let n = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for &x in xs {
                        let w = self.value(x).cols();
                        if self.rg(x) {
                            let gx = acc_buf(&mut node_grads, x, self.shape(x));
                            for r in 0..n {
                                add_into(&mut gx[r * w..(r + 1) * w], &gd[r * total + off..r * total + off + w]);
                            }
                        }
                        off += w;
                    }
                }
                Op::StackRows(xs) => {
                    let k = g.cols();
                    for (r, &x) in xs.iter().enumerate() {
                        if self.rg(x) {
                            add_into(acc_buf(&mut node_grads, x, self.shape(x)), &gd[r * k..(r + 1) * k]);
                        }
                    }
                }
                Op::Row(x, r) => {
                    let k = g.len();
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    add_into(&mut gx[r * k..(r + 1) * k], gd);
                }
                Op::Slice { x, start } => {
                    let (n, len) = g.dims2()?;
                    let c = self.value(*x).cols();
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for r in 0..n {
                        add_into(&mut gx[r * c + start..r * c + start + len], &gd[r * len..(r + 1) * len]);
                    }
                }
                Op::Embedding { param, indices } => {
                    let buf = grads.as_deref_mut().ok_or_else(|| {
                        DolfinError::InvalidArgument("embedding reached without a gradient buffer".into())
                    })?;
                    let table = buf.get_mut(*param);
                    let dim = table.cols();
                    for (r, &ix) in indices.iter().enumerate() {
                        add_into(table.row_mut(ix), &gd[r * dim..(r + 1) * dim]);
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for ((o, &v), &m) in gx.iter_mut().zip(gd).zip(mask) {
                        *o += v * m;
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let k = y.cols();
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * k..(r + 1) * k];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            gx[r * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for ((o, &v), &xi) in gx.iter_mut().zip(gd).zip(xv) {
                        if xi > T::zero() {
                            *o += v;
                        }
                    }
                }
                Op::ClampMaxOne(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for ((o, &v), &xi) in gx.iter_mut().zip(gd).zip(xv) {
                        if xi <= T::one() {
                            *o += v;
                        }
                    }
                }
                Op::Unfold { x, window, pad_left } => {
                    let (n, d) = self.value(*x).dims2()?;
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    let wd = window * d;
                    for i in 0..n {
                        for k in 0..*window {
                            let src = i as isize - *pad_left as isize + k as isize;
                            if src >= 0 && (src as usize) < n {
                                let s = src as usize;
                                add_into(&mut gx[s * d..(s + 1) * d], &gd[i * wd + k * d..i * wd + (k + 1) * d]);
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let k = argmax.len();
                    let gx = acc_buf(&mut node_grads, *x, self.shape(*x));
                    for (j, &a) in argmax.iter().enumerate() {
                        gx[a * k + j] += gd[j];
                    }
                }
                Op::LstmCell {
                    pre,
                    c_prev,
                    gates,
                    tanh_c,
                } => {
                    let h = tanh_c.len();
                    let cp = self.value(*c_prev).data().to_vec();
                    let one = T::one();
                    let mut dpre = vec![T::zero(); 4 * h];
                    let mut dc_prev = vec![T::zero(); h];
                    for j in 0..h {
                        let (ig, fg, cg, og) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                        let gh = gd[j];
                        let gc = gd[h + j] + gh * og * (one - tanh_c[j] * tanh_c[j]);
                        let d_o = gh * tanh_c[j];
                        let d_i = gc * cg;
                        let d_g = gc * ig;
                        let d_f = gc * cp[j];
                        dc_prev[j] = gc * fg;
                        dpre[j] = d_i * ig * (one - ig);
                        dpre[h + j] = d_f * fg * (one - fg);
                        dpre[2 * h + j] = d_g * (one - cg * cg);
                        dpre[3 * h + j] = d_o * og * (one - og);
                    }
                    if self.rg(*pre) {
                        add_into(acc_buf(&mut node_grads, *pre, self.shape(*pre)), &dpre);
                    }
                    if self.rg(*c_prev) {
                        add_into(acc_buf(&mut node_grads, *c_prev, self.shape(*c_prev)), &dc_prev);
                    }
                }
                Op::CrossEntropy { logits, gold, probs } => {
                    let gx = acc_buf(&mut node_grads, *logits, self.shape(*logits));
                    for (j, &p) in probs.iter().enumerate() {
                        let target = if j == *gold { T::one() } else { T::zero() };
                        gx[j] += gd[0] * (p - target);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc_buf<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
