//! Reverse-mode automatic differentiation over a recording tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node in a
//! Wengert list; values are computed eagerly at record time. [`Tape::backward`]
//! replays the list in reverse, accumulating gradients additively, and
//! [`Tape::harvest_into`] moves parameter-leaf gradients into the persistent
//! [`ParamStore`]. Node order is creation order, so a fixed call sequence gives
//! bitwise-identical forward and backward results.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor applied inside every `log` of the loss ops.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Axis along which a 2-D softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to 1 (normalizes across columns).
    Rows,
    /// Each column sums to 1 (normalizes across rows).
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sigmoid { x: Var },
    Relu { x: Var },
    Softmax { x: Var, axis: Axis },
    MaskedSoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    Conv1dSame { x: Var, kernel: Var, bias: Var, k: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    Reshape { x: Var },
    ColumnLookup { table: Var, ids: Vec<usize> },
    Sum { x: Var },
    MaskedNll { probs: Var, labels: Vec<usize>, valid: Vec<bool> },
    MaskedKl { student: Var, teacher: Var, valid: Vec<bool> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// One forward pass worth of recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_cache: HashMap<ParamId, Var>,
    backward_done: bool,
    /// Messages recorded when a loss op had to clamp a degenerate probability.
    pub numerical_warnings: Vec<String>,
}

impl Tape {
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

    /// Gradient of the last backward pass w.r.t. node `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        let id = Var(self.nodes.len());
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        id
    }

    /// Insert a constant (non-trainable) input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Insert a trainable parameter; repeated requests for the same id share
    /// one node so its gradient accumulates in a single buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(Op::Param(id), store.value(id).clone());
        self.param_cache.insert(id, v);
        v
    }

    /// Copy of `v`'s value with no backward path (gradient barrier).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(Op::Leaf, t)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        mm(ta.data(), tb.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::Matmul { a, b }, t))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", tx.shape())));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose { x }, t))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x + y);
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, t))
    }

    /// `[n x d] + [d]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.numel() != tx.cols() {
            return Err(Error::Shape(format!(
                "add_bias {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % d];
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias { x, bias }, t))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x * y);
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, t))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale { x, factor }, t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(Op::Sigmoid { x }, t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu { x }, t)
    }

    // ── Normalization ────────────────────────────────────────────────

    /// Softmax along `axis` of a 2-D tensor, with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::Shape(format!("softmax of {:?}", tx.shape())));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        match axis {
            Axis::Rows => {
                for i in 0..r {
                    softmax_slice(&mut out[i * c..(i + 1) * c], 1);
                }
            }
            Axis::Cols => {
                for j in 0..c {
                    softmax_slice(&mut out[j..], c);
                }
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::Softmax { x, axis }, t))
    }

    /// Row softmax where only `valid` key columns participate; invalid columns
    /// get weight exactly 0. Errors if no column is valid.
    pub fn masked_softmax_rows(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || tx.cols() != valid.len() {
            return Err(Error::Shape(format!(
                "masked softmax {:?} with {} mask entries",
                tx.shape(),
                valid.len()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Usage("masked softmax with no valid keys".into()));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                if valid[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::MaskedSoftmaxRows { x }, t))
    }

    /// Per-row normalization to zero mean / unit variance, then `gamma`/`beta`
    /// affine. `x` is `[n x d]`, `gamma`/`beta` are `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.shape().len() != 2 || tg.numel() != tx.cols() || tb.numel() != tx.cols() {
            return Err(Error::Shape(format!(
                "layer_norm {:?} with gamma {:?}, beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, t))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)`. Call only in training; evaluation simply skips the op.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let data = zip_map(tx.data(), &mask, |v, m| v * m);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, t))
    }

    // ── Convolution ──────────────────────────────────────────────────

    /// 1-D cross-correlation along the row axis with zero same-padding.
    /// `x` is `[n x d_in]`, `kernel` is `[k x d_in x d_out]`, `bias` is
    /// `[d_out]`; `k` must be odd.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        if tk.shape().len() != 3 {
            return Err(Error::Shape(format!("conv kernel {:?}", tk.shape())));
        }
        let (k, d_in, d_out) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size {k} must be odd")));
        }
        if tx.shape().len() != 2 || tx.cols() != d_in || tb.numel() != d_out {
            return Err(Error::Shape(format!(
                "conv1d x {:?}, kernel {:?}, bias {:?}",
                tx.shape(),
                tk.shape(),
                tb.shape()
            )));
        }
        let n = tx.rows();
        let pad = k / 2;
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let dst = &mut out[i * d_out..(i + 1) * d_out];
            dst.copy_from_slice(tb.data());
            for j in 0..k {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let xrow = &tx.data()[src as usize * d_in..(src as usize + 1) * d_in];
                let kslab = &tk.data()[j * d_in * d_out..(j + 1) * d_in * d_out];
                for c in 0..d_in {
                    let xv = xrow[c];
                    let krow = &kslab[c * d_out..(c + 1) * d_out];
                    for o in 0..d_out {
                        dst[o] += xv * krow[o];
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push(Op::Conv1dSame { x, kernel, bias, k }, t))
    }

    // ── Shape surgery ────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).shape().len() != 2 || self.value(p).rows() != r {
                return Err(Error::Shape("concat_cols row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, t))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || start + len > tx.rows() {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {start}+{len}) of {:?}",
                tx.shape()
            )));
        }
        let c = tx.cols();
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows { x, start, len }, t))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || start + len > tx.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {start}+{len}) of {:?}",
                tx.shape()
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols { x, start, len }, t))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, t))
    }

    /// Gather columns of `table` (`[d x s]`) into rows: row `i` of the output
    /// is column `ids[i]`. Used for speaker embedding lookup.
    pub fn column_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::Shape(format!("column_lookup of {:?}", tt.shape())));
        }
        let (d, s) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= s) {
            return Err(Error::Usage(format!(
                "column id {bad} out of range for table with {s} columns"
            )));
        }
        let n = ids.len();
        let mut data = vec![0.0; n * d];
        for (i, &id) in ids.iter().enumerate() {
            for k in 0..d {
                data[i * d + k] = tt.data()[k * s + id];
            }
        }
        let t = Tensor::new(vec![n, d], data)?;
        Ok(self.push(
            Op::ColumnLookup {
                table,
                ids: ids.to_vec(),
            },
            t,
        ))
    }

    // ── Reductions and losses ────────────────────────────────────────

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Mean negative log-likelihood over `valid` rows:
    /// `-(1/n_valid) * sum_i ln(max(probs[i, labels[i]], 1e-12))`.
    pub fn masked_nll(&mut self, probs: Var, labels: &[usize], valid: &[bool]) -> Result<Var> {
        let tp = self.value(probs);
        if tp.shape().len() != 2 || labels.len() != tp.rows() || valid.len() != tp.rows() {
            return Err(Error::Shape(format!(
                "masked_nll probs {:?}, {} labels, {} mask entries",
                tp.shape(),
                labels.len(),
                valid.len()
            )));
        }
        let c = tp.cols();
        if let Some((i, &bad)) = labels
            .iter()
            .enumerate()
            .find(|&(i, &l)| valid[i] && l >= c)
        {
            return Err(Error::Data(format!(
                "label {bad} at row {i} out of range for {c} classes"
            )));
        }
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(Error::Usage("masked_nll with no valid rows".into()));
        }
        let mut total = 0.0;
        for i in 0..tp.rows() {
            if valid[i] {
                total -= tp.get2(i, labels[i]).max(LOG_CLAMP).ln();
            }
        }
        let t = Tensor::scalar(total / n_valid as f64);
        Ok(self.push(
            Op::MaskedNll {
                probs,
                labels: labels.to_vec(),
                valid: valid.to_vec(),
            },
            t,
        ))
    }

    /// Mean KL divergence `KL(student || teacher)` over `valid` rows, with
    /// `0 * log 0 := 0` and probabilities clamped at `1e-12` inside the log.
    /// Both inputs are row-stochastic `[n x c]`.
    pub fn masked_kl(&mut self, student: Var, teacher: Var, valid: &[bool]) -> Result<Var> {
        let (ts, tt) = (self.value(student), self.value(teacher));
        if ts.shape() != tt.shape() || ts.shape().len() != 2 || valid.len() != ts.rows() {
            return Err(Error::Shape(format!(
                "masked_kl student {:?}, teacher {:?}, {} mask entries",
                ts.shape(),
                tt.shape(),
                valid.len()
            )));
        }
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(Error::Usage("masked_kl with no valid rows".into()));
        }
        let (r, c) = (ts.rows(), ts.cols());
        let mut total = 0.0;
        let mut clamped = 0usize;
        for (i, _) in valid.iter().enumerate().take(r).filter(|(_, &ok)| ok) {
            for j in 0..c {
                let s = ts.get2(i, j);
                if s <= 0.0 {
                    continue;
                }
                let t = tt.get2(i, j);
                if t < LOG_CLAMP && s > LOG_CLAMP {
                    clamped += 1;
                }
                total += s * (s.max(LOG_CLAMP).ln() - t.max(LOG_CLAMP).ln());
            }
        }
        if clamped > 0 {
            self.numerical_warnings.push(format!(
                "kl: clamped {clamped} near-zero teacher probabilities to {LOG_CLAMP}"
            ));
        }
        let t = Tensor::scalar(total / n_valid as f64);
        Ok(self.push(
            Op::MaskedKl {
                student,
                teacher,
                valid: valid.to_vec(),
            },
            t,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populate gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward called twice on one tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Add the gradients of all parameter leaves into `store`.
    pub fn harvest_into(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &self.grads[i] {
                    store.accumulate_grad(pid, g);
                }
            }
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let numel = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(g);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops only reference earlier nodes, so borrowing values immutably and
        // pushing into earlier grads never aliases.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                let (adata, bdata) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                // dA += g . B^T
                self.acc(a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gv * bdata[p * n + j];
                            }
                        }
                    }
                });
                // dB += A^T . g
                self.acc(b, |gb| {
                    for p in 0..k {
                        for i in 0..m {
                            let av = adata[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (r, c) = (self.value(x).rows(), self.value(x).cols());
                self.acc(x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(a, |ga| add_into(ga, g));
                self.acc(b, |gb| add_into(gb, g));
            }
            Op::AddBias { x, bias } => {
                let d = self.value(bias).numel();
                self.acc(x, |gx| add_into(gx, g));
                self.acc(bias, |gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (adata, bdata) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                self.acc(a, |ga| {
                    for ((gi, &gv), &bv) in ga.iter_mut().zip(g).zip(&bdata) {
                        *gi += gv * bv;
                    }
                });
                self.acc(b, |gb| {
                    for ((gi, &gv), &av) in gb.iter_mut().zip(g).zip(&adata) {
                        *gi += gv * av;
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.acc(x, |gx| {
                    for (gi, &gv) in gx.iter_mut().zip(g) {
                        *gi += gv * factor;
                    }
                });
            }
            Op::Sigmoid { x } => {
                let s = self.nodes[i].value.data().to_vec();
                self.acc(x, |gx| {
                    for ((gi, &gv), &sv) in gx.iter_mut().zip(g).zip(&s) {
                        *gi += gv * sv * (1.0 - sv);
                    }
                });
            }
            Op::Relu { x } => {
                let xdata = self.value(x).data().to_vec();
                self.acc(x, |gx| {
                    for ((gi, &gv), &xv) in gx.iter_mut().zip(g).zip(&xdata) {
                        if xv > 0.0 {
                            *gi += gv;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let out = self.nodes[i].value.clone();
                let (r, c) = (out.rows(), out.cols());
                self.acc(x, |gx| match axis {
                    Axis::Rows => {
                        for row in 0..r {
                            softmax_backward_slice(
                                &out.data()[row * c..(row + 1) * c],
                                &g[row * c..(row + 1) * c],
                                1,
                                &mut gx[row * c..(row + 1) * c],
                            );
                        }
                    }
                    Axis::Cols => {
                        for col in 0..c {
                            softmax_backward_slice(&out.data()[col..], &g[col..], c, &mut gx[col..]);
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows { x } => {
                // Invalid columns have weight 0, so the dense formula already
                // sends them zero gradient.
                let out = self.nodes[i].value.clone();
                let (r, c) = (out.rows(), out.cols());
                self.acc(x, |gx| {
                    for row in 0..r {
                        softmax_backward_slice(
                            &out.data()[row * c..(row + 1) * c],
                            &g[row * c..(row + 1) * c],
                            1,
                            &mut gx[row * c..(row + 1) * c],
                        );
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(x).clone();
                let tg = self.value(gamma).data().to_vec();
                let (r, c) = (tx.rows(), tx.cols());
                self.acc(beta, |gb| {
                    for row in 0..r {
                        for j in 0..c {
                            gb[j] += g[row * c + j];
                        }
                    }
                });
                self.acc(gamma, |gg| {
                    for row in 0..r {
                        let xrow = &tx.data()[row * c..(row + 1) * c];
                        let (mean, var) = mean_var(xrow);
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..c {
                            gg[j] += g[row * c + j] * (xrow[j] - mean) * inv;
                        }
                    }
                });
                self.acc(x, |gx| {
                    for row in 0..r {
                        let xrow = &tx.data()[row * c..(row + 1) * c];
                        let (mean, var) = mean_var(xrow);
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = g[row * c + j] * tg[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for j in 0..c {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = g[row * c + j] * tg[j];
                            gx[row * c + j] +=
                                inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(x, |gx| {
                    for ((gi, &gv), &m) in gx.iter_mut().zip(g).zip(&mask) {
                        *gi += gv * m;
                    }
                });
            }
            Op::Conv1dSame { x, kernel, bias, k } => {
                let tx = self.value(x).clone();
                let tk = self.value(kernel).clone();
                let (d_in, d_out) = (tk.shape()[1], tk.shape()[2]);
                let n = tx.rows();
                let pad = k / 2;
                self.acc(bias, |gb| {
                    for i in 0..n {
                        for o in 0..d_out {
                            gb[o] += g[i * d_out + o];
                        }
                    }
                });
                self.acc(kernel, |gk| {
                    for i in 0..n {
                        let grow = &g[i * d_out..(i + 1) * d_out];
                        for j in 0..k {
                            let src = i as isize + j as isize - pad as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let xrow = &tx.data()[src as usize * d_in..(src as usize + 1) * d_in];
                            for (c, &xv) in xrow.iter().enumerate() {
                                let base = (j * d_in + c) * d_out;
                                for (gkv, &gv) in gk[base..base + d_out].iter_mut().zip(grow) {
                                    *gkv += xv * gv;
                                }
                            }
                        }
                    }
                });
                self.acc(x, |gx| {
                    for i in 0..n {
                        let grow = &g[i * d_out..(i + 1) * d_out];
                        for j in 0..k {
                            let src = i as isize + j as isize - pad as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let xbase = src as usize * d_in;
                            for c in 0..d_in {
                                let base = (j * d_in + c) * d_out;
                                let acc: f64 = tk.data()[base..base + d_out]
                                    .iter()
                                    .zip(grow)
                                    .map(|(kv, gv)| kv * gv)
                                    .sum();
                                gx[xbase + c] += acc;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut row = 0;
                for p in parts {
                    let (r, c) = (self.value(p).rows(), self.value(p).cols());
                    let seg = g[row * c..(row + r) * c].to_vec();
                    self.acc(p, |gp| add_into(gp, &seg));
                    row += r;
                }
            }
            Op::ConcatCols { parts } => {
                let total = self.nodes[i].value.cols();
                let r = self.nodes[i].value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |gp| {
                        for row in 0..r {
                            for j in 0..w {
                                gp[row * w + j] += g[row * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = self.value(x).cols();
                self.acc(x, |gx| {
                    add_into(&mut gx[start * c..(start + len) * c], g);
                });
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.value(x).rows(), self.value(x).cols());
                self.acc(x, |gx| {
                    for row in 0..r {
                        for j in 0..len {
                            gx[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(x, |gx| add_into(gx, g));
            }
            Op::ColumnLookup { table, ids } => {
                let (d, s) = (self.value(table).rows(), self.value(table).cols());
                self.acc(table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for kk in 0..d {
                            gt[kk * s + id] += g[row * d + kk];
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.acc(x, |gx| {
                    for gi in gx.iter_mut() {
                        *gi += gv;
                    }
                });
            }
            Op::MaskedNll { probs, labels, valid } => {
                let tp = self.value(probs).clone();
                let c = tp.cols();
                let n_valid = valid.iter().filter(|&&v| v).count() as f64;
                let gv = g[0];
                self.acc(probs, |gp| {
                    for (row, (&label, &ok)) in labels.iter().zip(&valid).enumerate() {
                        if !ok {
                            continue;
                        }
                        let p = tp.get2(row, label);
                        if p > LOG_CLAMP {
                            gp[row * c + label] -= gv / (n_valid * p);
                        }
                    }
                });
            }
            Op::MaskedKl { student, teacher, valid } => {
                let ts = self.value(student).clone();
                let tt = self.value(teacher).clone();
                let (r, c) = (ts.rows(), ts.cols());
                let n_valid = valid.iter().filter(|&&v| v).count() as f64;
                let gv = g[0];
                self.acc(student, |gs| {
                    for row in 0..r {
                        if !valid[row] {
                            continue;
                        }
                        for j in 0..c {
                            let s = ts.get2(row, j);
                            if s <= 0.0 {
                                continue;
                            }
                            let log_ratio =
                                s.max(LOG_CLAMP).ln() - tt.get2(row, j).max(LOG_CLAMP).ln();
                            let lin = if s > LOG_CLAMP { 1.0 } else { 0.0 };
                            gs[row * c + j] += gv / n_valid * (log_ratio + lin);
                        }
                    }
                });
                self.acc(teacher, |gt| {
                    for row in 0..r {
                        if !valid[row] {
                            continue;
                        }
                        for j in 0..c {
                            let s = ts.get2(row, j);
                            let t = tt.get2(row, j);
                            if s > 0.0 && t > LOG_CLAMP {
                                gt[row * c + j] -= gv / n_valid * (s / t);
                            }
                        }
                    }
                });
            }
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out = a . b` for row-major `a` `[m x k]`, `b` `[k x n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// In-place stable softmax over a strided slice starting at `data[0]`.
fn softmax_slice(data: &mut [f64], stride: usize) {
    let max = data
        .iter()
        .step_by(stride)
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    let mut idx = 0;
    while idx < data.len() {
        data[idx] = (data[idx] - max).exp();
        sum += data[idx];
        idx += stride;
    }
    let mut idx = 0;
    while idx < data.len() {
        data[idx] /= sum;
        idx += stride;
    }
}

/// `gx += s * (g - <g, s>)` over a strided slice.
fn softmax_backward_slice(s: &[f64], g: &[f64], stride: usize, gx: &mut [f64]) {
    let mut dot = 0.0;
    let mut idx = 0;
    while idx < s.len() {
        dot += s[idx] * g[idx];
        idx += stride;
    }
    let mut idx = 0;
    while idx < s.len() {
        gx[idx] += s[idx] * (g[idx] - dot);
        idx += stride;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Relu { .. } => "relu",
        Op::Softmax { .. } => "softmax",
        Op::MaskedSoftmaxRows { .. } => "masked_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::Conv1dSame { .. } => "conv1d",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape { .. } => "reshape",
        Op::ColumnLookup { .. } => "column_lookup",
        Op::Sum { .. } => "sum",
        Op::MaskedNll { .. } => "masked_nll",
        Op::MaskedKl { .. } => "masked_kl",
    }
}
