//! Minimal reverse-mode differentiation engine.
//!
//! Operations are recorded in execution order into an arena of nodes; the
//! backward pass replays them in exact reverse order, accumulating
//! vector-Jacobian products. A tape plus its parameter store form one
//! single-threaded computation context; node values are immutable once
//! produced.

use std::collections::HashMap;

use crate::ctc;
use crate::error::{Error, Result};
use crate::matrix::{log_sum_exp, matmul, Matrix};
use crate::params::ModelParams;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddRowBroadcast { x: Var, bias: Var },
    MulColBroadcast { x: Var, col: Var },
    MulElem { a: Var, b: Var },
    SumAll { x: Var },
    SliceCols { x: Var, from: usize, to: usize },
    ConcatCols { parts: Vec<Var> },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    /// Softmax normalized only over entries whose mask bit is set; masked-out
    /// entries are exactly zero in the output.
    SoftmaxRowsMasked { x: Var, allowed: Vec<bool> },
    SoftmaxCols { x: Var },
    LogSoftmaxRows { x: Var },
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: f64 },
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    /// Gradient w.r.t. the log-prob inputs is computed during the forward
    /// pass (the forward-backward recursion produces both) and cached here.
    CtcLoss { log_probs: Var, grad: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    param: Option<String>,
}

/// Named gradients produced by one backward pass, in tape registration order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(String, Matrix)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Accumulate `scale` * grads into the store.
    pub fn accumulate_into(&self, store: &mut ModelParams, scale: f64) -> Result<()> {
        for (name, grad) in &self.entries {
            store.accumulate_grad(name, grad, scale)?;
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        id
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Registering the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &ModelParams, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = matmul(self.value(a), self.value(b))?;
        if !m.all_finite() {
            return Err(Error::Numerical("matmul produced non-finite values".into()));
        }
        Ok(self.push(m, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let m = self.value(x).transposed();
        self.push(m, Op::Transpose { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.shape() != mb.shape() {
            return Err(Error::dimension("add", ma.shape(), mb.shape()));
        }
        let mut out = ma.clone();
        out.add_scaled(mb, 1.0);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let m = self.value(x).map(|v| v * factor);
        self.push(m, Op::Scale { x, factor })
    }

    /// x (T x d) + bias (1 x d), broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (mx, mb) = (self.value(x), self.value(bias));
        if mb.rows() != 1 || mb.cols() != mx.cols() {
            return Err(Error::dimension("add_row_broadcast", mx.shape(), mb.shape()));
        }
        let mut out = mx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (v, b) in row.iter_mut().zip(mb.row(0)) {
                *v += b;
            }
        }
        let bvar = bias;
        Ok(self.push(out, Op::AddRowBroadcast { x, bias: bvar }))
    }

    /// x (T x d) scaled per row by col (T x 1).
    pub fn mul_col_broadcast(&mut self, x: Var, col: Var) -> Result<Var> {
        let (mx, mc) = (self.value(x), self.value(col));
        if mc.cols() != 1 || mc.rows() != mx.rows() {
            return Err(Error::dimension("mul_col_broadcast", mx.shape(), mc.shape()));
        }
        let mut out = mx.clone();
        for r in 0..out.rows() {
            let s = mc.get(r, 0);
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        Ok(self.push(out, Op::MulColBroadcast { x, col }))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.shape() != mb.shape() {
            return Err(Error::dimension("mul_elem", ma.shape(), mb.shape()));
        }
        let data: Vec<f64> = ma
            .data()
            .iter()
            .zip(mb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Matrix::from_vec(ma.rows(), ma.cols(), data)?;
        Ok(self.push(out, Op::MulElem { a, b }))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]).unwrap(), Op::SumAll { x })
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let mx = self.value(x);
        if from >= to || to > mx.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {from}..{to} out of range for {} cols",
                mx.cols()
            )));
        }
        let mut out = Matrix::zeros(mx.rows(), to - from);
        for r in 0..mx.rows() {
            out.row_mut(r).copy_from_slice(&mx.row(r)[from..to]);
        }
        Ok(self.push(out, Op::SliceCols { x, from, to }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::dimension("concat_cols", (rows, total), m.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let m = self.value(x).map(|v| v.max(0.0));
        self.push(m, Op::Relu { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mx = self.value(x);
        let mut out = mx.clone();
        for r in 0..out.rows() {
            softmax_slice(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows { x })
    }

    /// Row softmax restricted to positions with a set mask bit. Every row
    /// must keep at least one allowed entry.
    pub fn softmax_rows_masked(&mut self, x: Var, allowed: Vec<bool>) -> Result<Var> {
        let mx = self.value(x);
        if allowed.len() != mx.len() {
            return Err(Error::Contract(format!(
                "mask length {} does not match matrix of {} entries",
                allowed.len(),
                mx.len()
            )));
        }
        let cols = mx.cols();
        let mut out = Matrix::zeros(mx.rows(), cols);
        for r in 0..mx.rows() {
            let mask = &allowed[r * cols..(r + 1) * cols];
            if !mask.iter().any(|&m| m) {
                return Err(Error::Contract(format!("softmax row {r} fully masked")));
            }
            let row = mx.row(r);
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let orow = out.row_mut(r);
            for c in 0..cols {
                if mask[c] {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::SoftmaxRowsMasked { x, allowed }))
    }

    /// Softmax normalizing each column independently (over the row axis).
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let mx = self.value(x);
        let (rows, cols) = mx.shape();
        let mut out = Matrix::zeros(rows, cols);
        for c in 0..cols {
            let mut max = f64::NEG_INFINITY;
            for r in 0..rows {
                max = max.max(mx.get(r, c));
            }
            let mut sum = 0.0;
            for r in 0..rows {
                let e = (mx.get(r, c) - max).exp();
                out.set(r, c, e);
                sum += e;
            }
            for r in 0..rows {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
        self.push(out, Op::SoftmaxCols { x })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mx = self.value(x);
        let mut out = mx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows { x })
    }

    /// Row-wise layer norm with population variance and eps inside the root.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (mx, mg, mb) = (self.value(x), self.value(gamma), self.value(beta));
        if mg.rows() != 1 || mg.cols() != mx.cols() {
            return Err(Error::dimension("layer_norm gamma", mx.shape(), mg.shape()));
        }
        if mb.rows() != 1 || mb.cols() != mx.cols() {
            return Err(Error::dimension("layer_norm beta", mx.shape(), mb.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let d = mx.cols() as f64;
        let mut out = Matrix::zeros(mx.rows(), mx.cols());
        for r in 0..mx.rows() {
            let row = mx.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv_std = 1.0 / (var + eps).sqrt();
            let orow = out.row_mut(r);
            for c in 0..row.len() {
                let hat = (row[c] - mean) * inv_std;
                orow[c] = mg.get(0, c) * hat + mb.get(0, c);
            }
        }
        if !out.all_finite() {
            return Err(Error::Numerical("layer_norm produced non-finite values".into()));
        }
        Ok(self.push(out, Op::LayerNormRows { x, gamma, beta, eps }))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let mt = self.value(table);
        if ids.is_empty() {
            return Err(Error::Contract("embed of empty id sequence".into()));
        }
        let mut out = Matrix::zeros(ids.len(), mt.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= mt.rows() {
                return Err(Error::Contract(format!(
                    "embed id {id} out of range for table with {} rows",
                    mt.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(mt.row(id));
        }
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over rows of -log softmax(logits)[target]. 1x1 output.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ml = self.value(logits);
        if targets.len() != ml.rows() {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                ml.rows()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= ml.cols() {
                return Err(Error::Contract(format!(
                    "cross_entropy target id {t} out of vocab {}",
                    ml.cols()
                )));
            }
            let row = ml.row(r);
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / targets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical("cross_entropy produced non-finite loss".into()));
        }
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]).unwrap(),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// CTC negative log-likelihood of `target` given log-prob rows. 1x1 output.
    pub fn ctc_nll(&mut self, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
        let (nll, grad) = ctc::nll_and_grad(self.value(log_probs), blank, target)?;
        if !nll.is_finite() {
            return Err(Error::Numerical("CTC loss is non-finite".into()));
        }
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![nll]).unwrap(),
            Op::CtcLoss { log_probs, grad },
        ))
    }

    /// Weighted sum of scalar nodes; skips zero weights entirely.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if w == 0.0 {
                continue;
            }
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        match acc {
            Some(v) => Ok(v),
            None => Ok(self.input(Matrix::zeros(1, 1))),
        }
    }

    /// Reverse accumulation from a scalar loss. Returns named parameter
    /// gradients; parameters not reachable from the loss are omitted.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; build a new tape to differentiate again".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            self.backward_op(&op, idx, &g, &mut grads);
            // Re-store for parameter collection below.
            grads[idx] = Some(g);
        }

        let mut entries = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = &grads[idx] {
                    entries.push((name.clone(), g.clone()));
                }
            }
        }
        Ok(Gradients { entries })
    }

    /// backward() plus accumulation into the store's grad buffers.
    pub fn backward_into(&mut self, loss: Var, store: &mut ModelParams) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store, 1.0)
    }

    fn backward_op(&self, op: &Op, out_idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out_val = &self.nodes[out_idx].value;
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = matmul(g, &mb.transposed()).expect("matmul backward dA");
                let db = matmul(&ma.transposed(), g).expect("matmul backward dB");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose { x } => {
                accumulate(grads, *x, g.transposed());
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::AddRowBroadcast { x, bias } => {
                accumulate(grads, *x, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        db.set(0, c, db.get(0, c) + g.get(r, c));
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::MulColBroadcast { x, col } => {
                let (mx, mc) = (&self.nodes[x.0].value, &self.nodes[col.0].value);
                let mut dx = g.clone();
                let mut dcol = Matrix::zeros(mx.rows(), 1);
                for r in 0..mx.rows() {
                    let s = mc.get(r, 0);
                    let mut dot = 0.0;
                    for c in 0..mx.cols() {
                        dot += g.get(r, c) * mx.get(r, c);
                    }
                    dcol.set(r, 0, dot);
                    for v in dx.row_mut(r) {
                        *v *= s;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *col, dcol);
            }
            Op::MulElem { a, b } => {
                let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(mb.data())
                        .map(|(gv, bv)| gv * bv)
                        .collect(),
                )
                .unwrap();
                let db = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ma.data())
                        .map(|(gv, av)| gv * av)
                        .collect(),
                )
                .unwrap();
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SumAll { x } => {
                let mx = &self.nodes[x.0].value;
                let s = g.get(0, 0);
                accumulate(grads, *x, Matrix::filled(mx.rows(), mx.cols(), s));
            }
            Op::SliceCols { x, from, to } => {
                let mx = &self.nodes[x.0].value;
                let mut dx = Matrix::zeros(mx.rows(), mx.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*from..*to].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.nodes[p.0].value.cols();
                    let mut dp = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, p, dp);
                    offset += cols;
                }
            }
            Op::Relu { x } => {
                // Subgradient 0 at exactly 0.
                let mx = &self.nodes[x.0].value;
                let dx = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(mx.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows { x } | Op::SoftmaxRowsMasked { x, .. } => {
                // dx = y .* (g - sum(g .* y) per row); masked entries have
                // y == 0, which zeroes them automatically.
                let y = out_val;
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let dot: f64 = g
                        .row(r)
                        .iter()
                        .zip(y.row(r))
                        .map(|(gv, yv)| gv * yv)
                        .sum();
                    for c in 0..g.cols() {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCols { x } => {
                let y = out_val;
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for c in 0..g.cols() {
                    let mut dot = 0.0;
                    for r in 0..g.rows() {
                        dot += g.get(r, c) * y.get(r, c);
                    }
                    for r in 0..g.rows() {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxRows { x } => {
                // dx = g - softmax(x) * rowsum(g); softmax(x) = exp(out).
                let y = out_val;
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for c in 0..g.cols() {
                        dx.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let mx = &self.nodes[x.0].value;
                let mg = &self.nodes[gamma.0].value;
                let d = mx.cols() as f64;
                let mut dx = Matrix::zeros(mx.rows(), mx.cols());
                let mut dgamma = Matrix::zeros(1, mx.cols());
                let mut dbeta = Matrix::zeros(1, mx.cols());
                for r in 0..mx.rows() {
                    let row = mx.row(r);
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let hat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();

                    let mut dhat = vec![0.0; row.len()];
                    for c in 0..row.len() {
                        let gv = g.get(r, c);
                        dgamma.set(0, c, dgamma.get(0, c) + gv * hat[c]);
                        dbeta.set(0, c, dbeta.get(0, c) + gv);
                        dhat[c] = gv * mg.get(0, c);
                    }
                    let mean_dhat = dhat.iter().sum::<f64>() / d;
                    let mean_dhat_hat =
                        dhat.iter().zip(&hat).map(|(a, b)| a * b).sum::<f64>() / d;
                    for c in 0..row.len() {
                        dx.set(
                            r,
                            c,
                            inv_std * (dhat[c] - mean_dhat - hat[c] * mean_dhat_hat),
                        );
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Embed { table, ids } => {
                let mt = &self.nodes[table.0].value;
                let mut dt = Matrix::zeros(mt.rows(), mt.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..mt.cols() {
                        dt.set(id, c, dt.get(id, c) + g.get(i, c));
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::CrossEntropy { logits, targets } => {
                let ml = &self.nodes[logits.0].value;
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut dl = Matrix::zeros(ml.rows(), ml.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = ml.row(r);
                    let lse = log_sum_exp(row);
                    for c in 0..row.len() {
                        let p = (row[c] - lse).exp();
                        let indicator = if c == t { 1.0 } else { 0.0 };
                        dl.set(r, c, scale * (p - indicator));
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::CtcLoss { log_probs, grad } => {
                let s = g.get(0, 0);
                accumulate(grads, *log_probs, grad.map(|v| v * s));
            }
        }
    }
}

fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_with(name: &str, m: Matrix) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(name, m).unwrap();
        p
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_blocks_gradient() {
        let mut store = store_with("x", Matrix::row_vector(&[-1.0, -2.0, -3.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let loss = tape.sum_all(y);
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store.get("x").unwrap().grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_all_positive_is_identity() {
        let mut store = store_with("x", Matrix::row_vector(&[1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        let loss = tape.sum_all(y);
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_cols_uniform_and_log2() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap());
        let y = tape.softmax_cols(x);
        for r in 0..3 {
            assert!((tape.value(y).get(r, 0) - 1.0 / 3.0).abs() < 1e-15);
        }

        let x2 = tape.input(Matrix::from_rows(&[vec![0.0], vec![2.0f64.ln()]]).unwrap());
        let y2 = tape.softmax_cols(x2);
        assert!((tape.value(y2).get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y2).get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_cols_large_entries_stable() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_rows(&[vec![1000.0], vec![1000.0]]).unwrap());
        let y = tape.softmax_cols(x);
        assert_eq!(tape.value(y).get(0, 0), 0.5);
        assert_eq!(tape.value(y).get(1, 0), 0.5);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(&[1.0, 3.0]));
        let gamma = tape.input(Matrix::row_vector(&[1.0, 1.0]));
        let beta = tape.input(Matrix::row_vector(&[0.0, 0.0]));
        let y = tape.layer_norm_rows(x, gamma, beta, 1e-12).unwrap();
        assert!((tape.value(y).get(0, 0) + 1.0).abs() < 1e-6);
        assert!((tape.value(y).get(0, 1) - 1.0).abs() < 1e-6);

        // Constant row: eps guards the zero variance.
        let c = tape.input(Matrix::row_vector(&[5.0, 5.0]));
        let yc = tape.layer_norm_rows(c, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(yc).data().iter().all(|v| v.abs() < 1e-9));

        // Affine of the first example.
        let gamma2 = tape.input(Matrix::row_vector(&[2.0, 2.0]));
        let beta2 = tape.input(Matrix::row_vector(&[1.0, 1.0]));
        let y2 = tape.layer_norm_rows(x, gamma2, beta2, 1e-12).unwrap();
        assert!((tape.value(y2).get(0, 0) + 1.0).abs() < 1e-6);
        assert!((tape.value(y2).get(0, 1) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_loss_gradient() {
        let mut store = store_with("x", Matrix::row_vector(&[1.5, -2.0, 0.5]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let sq = tape.mul_elem(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad.data(), &[3.0, -4.0, 1.0]);
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A*B); dA = 1 * B^T, dB = A^T * 1.
        let mut store = ModelParams::new();
        store
            .insert("a", Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        store
            .insert("b", Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward_into(loss, &mut store).unwrap();
        // dA = ones * B^T
        assert_eq!(store.get("a").unwrap().grad.data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(store.get("b").unwrap().grad.data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(&[1.0]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_keeps_zero_grad() {
        let mut store = ModelParams::new();
        store.insert("used", Matrix::row_vector(&[2.0])).unwrap();
        store.insert("unused", Matrix::row_vector(&[3.0])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, "used").unwrap();
        let _orphan = tape.param(&store, "unused").unwrap();
        let sq = tape.mul_elem(u, u).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get("used").unwrap().grad.get(0, 0), 4.0);
        assert_eq!(store.get("unused").unwrap().grad.get(0, 0), 0.0);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_rows(&[vec![5.0, 100.0], vec![1.0, 1.0]]).unwrap());
        let y = tape
            .softmax_rows_masked(x, vec![true, false, true, true])
            .unwrap();
        assert_eq!(tape.value(y).get(0, 0), 1.0);
        assert_eq!(tape.value(y).get(0, 1), 0.0);
        assert_eq!(tape.value(y).get(1, 0), 0.5);
    }

    #[test]
    fn reexecution_is_bit_identical() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.input(Matrix::row_vector(&[0.3, -1.2, 7.5]));
            let y = tape.relu(x);
            let s = tape.softmax_rows(y);
            let l = tape.log_softmax_rows(s);
            tape.value(l).clone()
        };
        assert_eq!(build(), build());
    }

    proptest! {
        #[test]
        fn softmax_cols_columns_sum_to_one(
            vals in proptest::collection::vec(-1e4f64..1e4, 12)
        ) {
            let mut tape = Tape::new();
            let x = tape.input(Matrix::from_vec(4, 3, vals).unwrap());
            let y = tape.softmax_cols(x);
            for c in 0..3 {
                let sum: f64 = (0..4).map(|r| tape.value(y).get(r, c)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_rows_zero_mean_unit_var(
            vals in proptest::collection::vec(-100.0f64..100.0, 8)
        ) {
            let mut tape = Tape::new();
            let x = tape.input(Matrix::from_vec(1, 8, vals).unwrap());
            let gamma = tape.input(Matrix::filled(1, 8, 1.0));
            let beta = tape.input(Matrix::zeros(1, 8));
            let eps = 1e-5;
            let y = tape.layer_norm_rows(x, gamma, beta, eps).unwrap();
            let row = tape.value(y).row(0);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            // Output variance is var/(var+eps), i.e. 1 up to the eps correction.
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }
}
