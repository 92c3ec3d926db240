use super::kernels::{self, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, norm, sigmoid};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};
use std::collections::HashMap;

/// Lower bound applied to each norm in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges `(start, len)` over a stacked matrix.
pub type Segments = Vec<(usize, usize)>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    MeanLast(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Segments,
        key_valid: Vec<bool>,
        probs: Vec<f64>,
    },
    SegmentSoftmax {
        x: Var,
        segments: Segments,
    },
    SegmentWeightedMean {
        x: Var,
        w: Var,
        segments: Segments,
        denom: Vec<f64>,
    },
    Cosine {
        u: Var,
        v: Var,
    },
    CrossEntropy {
        logits: Var,
        gold: usize,
        probs: Vec<f64>,
    },
}

/// A single-owner tape of tensor ops.
///
/// Ops are appended in evaluation order, so the node list is already
/// topologically sorted and backward is a reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    param_of: Vec<Option<ParamId>>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn check_segments(op: &'static str, segments: &[(usize, usize)], rows: usize) -> Result<()> {
    for &(start, len) in segments {
        if len == 0 || start + len > rows {
            return Err(invalid(
                op,
                format!("segment ({start}, {len}) outside {rows} rows"),
            ));
        }
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(buf) => buf.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0].item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.param_of.push(None);
        Var(self.values.len() - 1)
    }

    fn emit(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let value = Tensor::new(shape, data)?;
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        Ok(self.push(value, op, needs))
    }

    /// Adds a leaf. It participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        let mut t = tensor;
        t.zero_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone().with_grad());
        self.param_of[v.0] = Some(id);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.emit("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.emit("add", shape, out, Op::Add(a, b), &[a, b])
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(mismatch(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % cols])
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("add_row", shape, out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.emit("mul", shape, out, Op::Mul(a, b), &[a, b])
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|x| scale * x + shift)
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("affine", shape, out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, 1.0, c)
    }

    /// `1 - a`
    pub fn complement(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("relu", shape, out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("sigmoid", shape, out, Op::Sigmoid(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        let mut out = self.value(a).data().to_vec();
        out.chunks_mut(cols).for_each(kernels::softmax_in_place);
        let shape = self.shape(a).to_vec();
        self.emit("softmax", shape, out, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(mismatch(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = self.value(x).rows();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        {
            let (xv, g, b) = (
                self.value(x).data(),
                self.value(gain).data(),
                self.value(bias).data(),
            );
            for row in xv.chunks(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * is;
                    xhat.push(h);
                    out.push(h * g[j] + b[j]);
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.emit(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Mean over rows (axis 0 of the matrix view); result has shape `[cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; cols];
        for row in t.data().chunks(cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        self.emit("mean_rows", vec![cols], out, Op::MeanRows(a), &[a])
    }

    /// Mean over the last axis; result has shape `[rows]`.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let out: Vec<f64> = t
            .data()
            .chunks(cols)
            .map(|r| r.iter().sum::<f64>() / cols as f64)
            .collect();
        let rows = out.len();
        self.emit("mean_last", vec![rows], out, Op::MeanLast(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Sum of scalar nodes. An empty list is an error.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| invalid("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch(
                    "concat_rows",
                    format!("{cols} cols vs {:?}", t.shape()),
                ));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.emit(
            "concat_rows",
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(invalid("gather_rows", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(invalid(
                    "gather_rows",
                    format!("id {id} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(t.row(id));
        }
        self.emit(
            "gather_rows",
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if len == 0 || start + len > rows {
            return Err(invalid(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let out = t.data()[start * cols..(start + len) * cols].to_vec();
        let shape = if t.shape().len() == 1 {
            vec![len]
        } else {
            vec![len, cols]
        };
        self.emit("slice_rows", shape, out, Op::SliceRows { x, start }, &[x])
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    /// Scaled dot-product multi-head attention over stacked sequences.
    ///
    /// Each `(start, len)` segment attends only within itself, and only to
    /// keys whose `key_valid` flag is set. Query rows attend regardless of
    /// their own flag.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        key_valid: &[bool],
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice()
        {
            return Err(mismatch(
                "attention",
                format!("q {shape:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let (rows, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(invalid("attention", format!("{d} dims over {heads} heads")));
        }
        if key_valid.len() != rows {
            return Err(invalid("attention", "key mask length differs from rows"));
        }
        check_segments("attention", segments, rows)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::new();
        for &(start, len) in segments {
            if !key_valid[start..start + len].iter().any(|&b| b) {
                return Err(invalid("attention", "segment has no valid keys"));
            }
            for h in 0..heads {
                let off = h * dh;
                for i in start..start + len {
                    let qi = &qd[i * d + off..i * d + off + dh];
                    let base = probs.len();
                    for j in start..start + len {
                        probs.push(if key_valid[j] {
                            dot(qi, &kd[j * d + off..j * d + off + dh]) * scale
                        } else {
                            f64::NEG_INFINITY
                        });
                    }
                    kernels::softmax_in_place(&mut probs[base..]);
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for (jj, j) in (start..start + len).enumerate() {
                        let p = probs[base + jj];
                        if p == 0.0 {
                            continue;
                        }
                        for (ov, vv) in o.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
        self.emit(
            "attention",
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                key_valid: key_valid.to_vec(),
                probs,
            },
            &[q, k, v],
        )
    }

    /// Softmax of a column of scores within each segment. Rows outside every
    /// segment are zero.
    pub fn segment_softmax(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != 1 {
            return Err(mismatch("segment_softmax", format!("{:?}", t.shape())));
        }
        let rows = t.rows();
        check_segments("segment_softmax", segments, rows)?;
        let mut out = vec![0.0; rows];
        for &(start, len) in segments {
            out[start..start + len].copy_from_slice(&t.data()[start..start + len]);
            kernels::softmax_in_place(&mut out[start..start + len]);
        }
        let shape = t.shape().to_vec();
        self.emit(
            "segment_softmax",
            shape,
            out,
            Op::SegmentSoftmax {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        )
    }

    /// For each segment, `Σ w_t x_t / Σ w_t` over its rows. `w` is a column
    /// of non-negative weights aligned with the rows of `x`.
    pub fn segment_weighted_mean(
        &mut self,
        x: Var,
        w: Var,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.shape().len() != 2 || wt.cols() != 1 || wt.rows() != xt.rows() {
            return Err(mismatch(
                "segment_weighted_mean",
                format!("x {:?}, w {:?}", xt.shape(), wt.shape()),
            ));
        }
        let d = xt.cols();
        check_segments("segment_weighted_mean", segments, xt.rows())?;
        let mut out = vec![0.0; segments.len() * d];
        let mut denom = Vec::with_capacity(segments.len());
        for (s, &(start, len)) in segments.iter().enumerate() {
            let ws = &wt.data()[start..start + len];
            if ws.iter().any(|&w| w < 0.0) {
                return Err(invalid("segment_weighted_mean", "negative pooling weight"));
            }
            let total: f64 = ws.iter().sum();
            if total < 1e-9 {
                return Err(invalid(
                    "segment_weighted_mean",
                    format!("pooling weights sum to {total:e}"),
                ));
            }
            let o = &mut out[s * d..(s + 1) * d];
            for (t, &wv) in ws.iter().enumerate() {
                for (ov, xv) in o.iter_mut().zip(xt.row(start + t)) {
                    *ov += wv * xv;
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
            denom.push(total);
        }
        self.emit(
            "segment_weighted_mean",
            vec![segments.len(), d],
            out,
            Op::SegmentWeightedMean {
                x,
                w,
                segments: segments.to_vec(),
                denom,
            },
            &[x, w],
        )
    }

    /// `u·v / (max(‖u‖, ε) · max(‖v‖, ε))` over the flattened values.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let (ut, vt) = (self.value(u), self.value(v));
        if ut.len() != vt.len() {
            return Err(mismatch(
                "cosine",
                format!("{:?} vs {:?}", ut.shape(), vt.shape()),
            ));
        }
        let c = cosine_value(ut.data(), vt.data());
        self.emit("cosine", vec![1], vec![c], Op::Cosine { u, v }, &[u, v])
    }

    /// `-log softmax(logits)[gold]`, computed with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let l = self.value(logits).data();
        if gold >= l.len() {
            return Err(invalid(
                "cross_entropy",
                format!("gold {gold} out of range for {} logits", l.len()),
            ));
        }
        let mut probs = l.to_vec();
        kernels::softmax_in_place(&mut probs);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - l[gold];
        self.emit(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            },
            &[logits],
        )
    }

    /// Gradient of the last backward pass(es) at `v`. Leaves accumulate
    /// across repeated backward calls; interior nodes hold the latest pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if matches!(self.ops[v.0], Op::Leaf) {
            self.leaf_grads.get(&v.0).map(Vec::as_slice)
        } else {
            self.grads.get(v.0).and_then(|g| g.as_deref())
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.ops[idx], g) {
                if self.needs_grad[idx] {
                    let mut slot = self.leaf_grads.remove(&idx);
                    add_into(&mut slot, g);
                    self.leaf_grads.insert(idx, slot.expect("just filled"));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Runs [`Graph::backward`] and accumulates the gradients of bound
    /// parameters into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        for (idx, pid) in self.param_of.iter().enumerate() {
            if let (Some(pid), Some(Some(g))) = (pid, self.grads.get(idx)) {
                store.get_mut(*pid).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: &Var| self.needs_grad[v.0];
        let val = |v: &Var| self.values[v.0].data();
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g, val(b), &mut da, m, n, k);
                    add_into(&mut grads[a.0], &da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(val(a), g, &mut db, m, k, n);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(row) {
                    let cols = self.values[row.0].len();
                    let mut dr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    add_into(&mut grads[row.0], &dr);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    add_into(&mut grads[a.0], &zip_map(g, val(b), |x, y| x * y));
                }
                if needs(b) {
                    add_into(&mut grads[b.0], &zip_map(g, val(a), |x, y| x * y));
                }
            }
            Op::Affine(a, scale) => {
                let d: Vec<f64> = g.iter().map(|x| x * scale).collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::Relu(a) => {
                let d = zip_map(g, val(a), |x, y| if y > 0.0 { x } else { 0.0 });
                add_into(&mut grads[a.0], &d);
            }
            Op::Sigmoid(a) => {
                let y = self.values[idx].data();
                let d = zip_map(g, y, |x, s| x * s * (1.0 - s));
                add_into(&mut grads[a.0], &d);
            }
            Op::Softmax(a) => {
                let y = self.values[idx].data();
                let cols = self.values[idx].cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let s = dot(yr, gr);
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.values[idx].cols();
                let gv = val(gain);
                if needs(x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = dot(&dh, hr) / cols as f64;
                        for ((o, d), h) in dxr.iter_mut().zip(&dh).zip(hr) {
                            *o = inv_std[r] * (d - mean_dh - h * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if needs(gain) {
                    let mut dg = vec![0.0; cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, a), b) in dg.iter_mut().zip(gr).zip(hr) {
                            *o += a * b;
                        }
                    }
                    add_into(&mut grads[gain.0], &dg);
                }
                if needs(bias) {
                    let mut db = vec![0.0; cols];
                    for gr in g.chunks(cols) {
                        db.iter_mut().zip(gr).for_each(|(o, a)| *o += a);
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::MeanRows(a) => {
                let t = &self.values[a.0];
                let rows = t.rows() as f64;
                let d: Vec<f64> = (0..t.len()).map(|i| g[i % t.cols()] / rows).collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::MeanLast(a) => {
                let t = &self.values[a.0];
                let cols = t.cols();
                let d: Vec<f64> = (0..t.len()).map(|i| g[i / cols] / cols as f64).collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.values[a.0].len()];
                add_into(&mut grads[a.0], &d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.values[p.0].len();
                    if needs(p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let t = &self.values[table.0];
                let cols = t.cols();
                let mut d = vec![0.0; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for (o, x) in d[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&g[i * cols..(i + 1) * cols])
                    {
                        *o += x;
                    }
                }
                add_into(&mut grads[table.0], &d);
            }
            Op::SliceRows { x, start } => {
                let t = &self.values[x.0];
                let cols = t.cols();
                let mut d = vec![0.0; t.len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                add_into(&mut grads[x.0], &d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                key_valid,
                probs,
            } => {
                let (rows, d) = (self.values[idx].rows(), self.values[idx].cols());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut offset = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in start..start + len {
                            let p = &probs[offset..offset + len];
                            offset += len;
                            let gi = &g[i * d + off..i * d + off + dh];
                            // dP_ij = gᵢ·vⱼ, then softmax backward.
                            let dp: Vec<f64> = (start..start + len)
                                .map(|j| {
                                    if key_valid[j] {
                                        dot(gi, &vd[j * d + off..j * d + off + dh])
                                    } else {
                                        0.0
                                    }
                                })
                                .collect();
                            let s = dot(p, &dp);
                            for (jj, j) in (start..start + len).enumerate() {
                                let pj = p[jj];
                                if pj == 0.0 {
                                    continue;
                                }
                                for (o, x) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                    *o += pj * x;
                                }
                                let ds = pj * (dp[jj] - s) * scale;
                                for t in 0..dh {
                                    dq[i * d + off + t] += ds * kd[j * d + off + t];
                                    dk[j * d + off + t] += ds * qd[i * d + off + t];
                                }
                            }
                        }
                    }
                }
                if needs(q) {
                    add_into(&mut grads[q.0], &dq);
                }
                if needs(k) {
                    add_into(&mut grads[k.0], &dk);
                }
                if needs(v) {
                    add_into(&mut grads[v.0], &dv);
                }
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = self.values[idx].data();
                let mut d = vec![0.0; y.len()];
                for &(start, len) in segments {
                    let (yr, gr) = (&y[start..start + len], &g[start..start + len]);
                    let s = dot(yr, gr);
                    for t in 0..len {
                        d[start + t] = yr[t] * (gr[t] - s);
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::SegmentWeightedMean {
                x,
                w,
                segments,
                denom,
            } => {
                let (xt, wt, out) = (&self.values[x.0], &self.values[w.0], &self.values[idx]);
                let d = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                let mut dw = vec![0.0; wt.len()];
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let gs = &g[s * d..(s + 1) * d];
                    let pooled = out.row(s);
                    for t in start..start + len {
                        let wv = wt.data()[t] / denom[s];
                        for (o, gv) in dx[t * d..(t + 1) * d].iter_mut().zip(gs) {
                            *o += wv * gv;
                        }
                        let diff: f64 = xt
                            .row(t)
                            .iter()
                            .zip(pooled)
                            .zip(gs)
                            .map(|((xv, p), gv)| (xv - p) * gv)
                            .sum();
                        dw[t] += diff / denom[s];
                    }
                }
                if needs(x) {
                    add_into(&mut grads[x.0], &dx);
                }
                if needs(w) {
                    add_into(&mut grads[w.0], &dw);
                }
            }
            Op::Cosine { u, v } => {
                let (ud, vd) = (val(u), val(v));
                let c = self.values[idx].item();
                let (nu, nv) = (norm(ud), norm(vd));
                let (du_den, dv_den) = (nu.max(COSINE_EPS), nv.max(COSINE_EPS));
                let inv = 1.0 / (du_den * dv_den);
                if needs(u) {
                    let shrink = if nu > COSINE_EPS { c / (nu * nu) } else { 0.0 };
                    let d: Vec<f64> = ud
                        .iter()
                        .zip(vd)
                        .map(|(a, b)| g[0] * (b * inv - shrink * a))
                        .collect();
                    add_into(&mut grads[u.0], &d);
                }
                if needs(v) {
                    let shrink = if nv > COSINE_EPS { c / (nv * nv) } else { 0.0 };
                    let d: Vec<f64> = vd
                        .iter()
                        .zip(ud)
                        .map(|(b, a)| g[0] * (a * inv - shrink * b))
                        .collect();
                    add_into(&mut grads[v.0], &d);
                }
            }
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| g[0] * (p - if j == *gold { 1.0 } else { 0.0 }))
                    .collect();
                add_into(&mut grads[logits.0], &d);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Guarded cosine similarity on plain slices.
pub fn cosine_value(u: &[f64], v: &[f64]) -> f64 {
    let c = dot(u, v) / (norm(u).max(COSINE_EPS) * norm(v).max(COSINE_EPS));
    c.clamp(-1.0, 1.0)
}
