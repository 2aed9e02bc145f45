//! Minimal reverse-mode automatic differentiation over [`Tensor2D`].
//!
//! The tape records one node per primitive op; `backward` walks the nodes
//! in reverse and accumulates gradients. Ops are the exact set the encoder,
//! contrastive loss and decoder need — nothing speculative. Every backward
//! rule is covered by a finite-difference test below.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::gradcheck::ParamStore;
use crate::tensor::{masked_softmax_rows, AttnMask, Tensor2D};

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulTB(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    /// matrix + broadcast row (1×n)
    AddRow(usize, usize),
    /// matrix × scalar node (1×1)
    MulScalar(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    MaskedSoftmax { src: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu(usize),
    Exp(usize),
    SumAll(usize),
    MeanAll(usize),
    L2NormalizeRows(usize),
    /// Pairwise rotation; cos/sin are rows×(cols/2), one angle per pair.
    Rope { x: usize, cos: Rc<Tensor2D>, sin: Rc<Tensor2D> },
    GatherRows { table: usize, idx: Vec<usize> },
    /// Mean cross-entropy of row-wise softmax against integer targets.
    CrossEntropyMean { logits: usize, targets: Vec<usize> },
}

struct Node {
    value: Tensor2D,
    op: Op,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(usize, String)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: Vec::new() }
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient binding.
    pub fn constant(&mut self, t: Tensor2D) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a named parameter; `backward_into` adds its gradient
    /// to the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf);
        self.bindings.push((v.0, name.to_string()));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert!(t.rows == 1 && t.cols == 1, "scalar() on {}x{}", t.rows, t.cols);
        t.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_transpose_b(self.value(b))?;
        Ok(self.push(value, Op::MatMulTB(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(value, Op::MulElem(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = (self.value(a).rows, self.value(a).cols);
        let r = self.value(row);
        if r.rows != 1 || r.cols != n {
            return Err(Error::Shape(format!("add_row {}x{} + {}x{}", m, n, r.rows, r.cols)));
        }
        let mut value = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                value.data[i * n + j] += r.data[j];
            }
        }
        Ok(self.push(value, Op::AddRow(a.0, row.0)))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.rows != 1 || sv.cols != 1 {
            return Err(Error::Shape("mul_scalar needs a 1x1 node".into()));
        }
        let value = self.value(a).scale(sv.data[0]);
        Ok(self.push(value, Op::MulScalar(a.0, s.0)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(Error::Shape("concat_rows with mixed col counts".into()));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let value = Tensor2D::from_vec(rows, cols, data);
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|v| v.0).collect())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if start + len > t.rows {
            return Err(Error::Shape(format!(
                "slice_rows {}..{} of {} rows",
                start,
                start + len,
                t.rows
            )));
        }
        let value = Tensor2D::from_vec(
            len,
            t.cols,
            t.data[start * t.cols..(start + len) * t.cols].to_vec(),
        );
        Ok(self.push(value, Op::SliceRows { src: src.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows != rows {
                return Err(Error::Shape("concat_cols with mixed row counts".into()));
            }
            cols += self.value(p).cols;
        }
        let mut value = Tensor2D::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                let dst = i * cols + offset;
                value.data[dst..dst + t.cols].copy_from_slice(t.row(i));
            }
            offset += t.cols;
        }
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if start + len > t.cols {
            return Err(Error::Shape(format!(
                "slice_cols {}..{} of {} cols",
                start,
                start + len,
                t.cols
            )));
        }
        let mut value = Tensor2D::zeros(t.rows, len);
        for i in 0..t.rows {
            value.row_mut(i).copy_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push(value, Op::SliceCols { src: src.0, start }))
    }

    pub fn masked_softmax(&mut self, logits: Var, mask: &AttnMask) -> Result<Var> {
        let value = masked_softmax_rows(self.value(logits), mask)?;
        Ok(self.push(value, Op::MaskedSoftmax { src: logits.0 }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let g = self.value(gain);
        let b = self.value(bias);
        if g.rows != 1 || b.rows != 1 {
            return Err(Error::Shape("layer_norm gain/bias must be 1xN".into()));
        }
        let value = crate::tensor::layer_norm(self.value(x), &g.data.clone(), &b.data.clone(), eps)?;
        Ok(self.push(value, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data.iter_mut() {
            *v = gelu_forward(*v);
        }
        self.push(value, Op::Gelu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data.iter_mut() {
            *v = v.exp();
        }
        self.push(value, Op::Exp(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor2D::from_vec(1, 1, vec![s]), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data.iter().sum::<f64>() / (t.data.len() as f64);
        self.push(Tensor2D::from_vec(1, 1, vec![s]), Op::MeanAll(a.0))
    }

    /// L2-normalize each row; errors on a (near-)zero row.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut value = t.clone();
        for i in 0..t.rows {
            let norm = t.row_l2_norm(i);
            if norm < 1e-12 {
                return Err(Error::Numeric(format!(
                    "cannot normalize zero vector (row {i} before projection normalization)"
                )));
            }
            for v in value.row_mut(i) {
                *v /= norm;
            }
        }
        Ok(self.push(value, Op::L2NormalizeRows(a.0)))
    }

    /// Rotate consecutive column pairs of `x` by the angles whose cos/sin
    /// are given per (row, pair).
    pub fn rope(&mut self, x: Var, cos: Rc<Tensor2D>, sin: Rc<Tensor2D>) -> Result<Var> {
        let t = self.value(x);
        if t.cols % 2 != 0 || cos.rows != t.rows || cos.cols != t.cols / 2 || sin.rows != t.rows || sin.cols != t.cols / 2 {
            return Err(Error::Shape(format!(
                "rope x {}x{} vs tables {}x{}",
                t.rows, t.cols, cos.rows, cos.cols
            )));
        }
        let value = crate::tensor::rotate_pairs(t, &cos, &sin, false);
        Ok(self.push(value, Op::Rope { x: x.0, cos, sin }))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut value = Tensor2D::zeros(idx.len(), t.cols);
        for (i, &r) in idx.iter().enumerate() {
            if r >= t.rows {
                return Err(Error::Shape(format!("gather row {r} from {} rows", t.rows)));
            }
            value.row_mut(i).copy_from_slice(t.row(r));
        }
        Ok(self.push(value, Op::GatherRows { table: table.0, idx: idx.to_vec() }))
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.rows {
            return Err(Error::Shape(format!(
                "cross_entropy {} targets for {} rows",
                targets.len(),
                t.rows
            )));
        }
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= t.cols {
                return Err(Error::Shape(format!("target {target} out of {} classes", t.cols)));
            }
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
            total += log_sum - row[target];
        }
        let value = Tensor2D::from_vec(1, 1, vec![total / targets.len() as f64]);
        Ok(self.push(value, Op::CrossEntropyMean { logits: logits.0, targets: targets.to_vec() }))
    }

    /// Reverse pass from a 1×1 root; returns per-node gradients.
    fn backward(&self, root: Var) -> Vec<Option<Tensor2D>> {
        let rt = &self.nodes[root.0].value;
        assert!(rt.rows == 1 && rt.cols == 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor2D::from_vec(1, 1, vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    /// Run backward and add bound-parameter gradients into the store.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(root);
        for (node, name) in &self.bindings {
            if let Some(g) = &grads[*node] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Run backward and return gradients for bound parameters by name.
    pub fn grads_by_name(&self, root: Var) -> HashMap<String, Tensor2D> {
        let grads = self.backward(root);
        let mut out: HashMap<String, Tensor2D> = HashMap::new();
        for (node, name) in &self.bindings {
            if let Some(g) = &grads[*node] {
                out.entry(name.clone())
                    .and_modify(|acc| *acc = acc.add(g).expect("grad shape"))
                    .or_insert_with(|| g.clone());
            }
        }
        out
    }

    fn accumulate(&self, i: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        let add_to = |grads: &mut [Option<Tensor2D>], idx: usize, delta: Tensor2D| {
            match &mut grads[idx] {
                Some(existing) => {
                    for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_transpose_b(&self.nodes[*b].value).expect("shape");
                let db = self.nodes[*a].value.matmul_transpose_a(g).expect("shape");
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::MatMulTB(a, b) => {
                let da = g.matmul(&self.nodes[*b].value).expect("shape");
                let db = g.matmul_transpose_a(&self.nodes[*a].value).expect("shape");
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.scale(-1.0));
            }
            Op::MulElem(a, b) => {
                add_to(grads, *a, g.mul_elem(&self.nodes[*b].value).expect("shape"));
                add_to(grads, *b, g.mul_elem(&self.nodes[*a].value).expect("shape"));
            }
            Op::Scale(a, s) => add_to(grads, *a, g.scale(*s)),
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let mut dr = Tensor2D::zeros(1, g.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        dr.data[j] += g.get(i, j);
                    }
                }
                add_to(grads, *row, dr);
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[*s].value.data[0];
                add_to(grads, *a, g.scale(sv));
                let ds: f64 = g
                    .data
                    .iter()
                    .zip(&self.nodes[*a].value.data)
                    .map(|(gv, av)| gv * av)
                    .sum();
                add_to(grads, *s, Tensor2D::from_vec(1, 1, vec![ds]));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows;
                    let part = Tensor2D::from_vec(
                        rows,
                        g.cols,
                        g.data[start * g.cols..(start + rows) * g.cols].to_vec(),
                    );
                    add_to(grads, p, part);
                    start += rows;
                }
            }
            Op::SliceRows { src, start } => {
                let st = &self.nodes[*src].value;
                let mut d = Tensor2D::zeros(st.rows, st.cols);
                d.data[start * st.cols..(start + g.rows) * st.cols].copy_from_slice(&g.data);
                add_to(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.cols;
                    let mut part = Tensor2D::zeros(g.rows, cols);
                    for i in 0..g.rows {
                        part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                    }
                    add_to(grads, p, part);
                    offset += cols;
                }
            }
            Op::SliceCols { src, start } => {
                let st = &self.nodes[*src].value;
                let mut d = Tensor2D::zeros(st.rows, st.cols);
                for i in 0..g.rows {
                    d.row_mut(i)[*start..start + g.cols].copy_from_slice(g.row(i));
                }
                add_to(grads, *src, d);
            }
            Op::MaskedSoftmax { src } => {
                let y = &self.nodes[i].value;
                let mut d = Tensor2D::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                add_to(grads, *src, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let n = xv.cols as f64;
                let mut dx = Tensor2D::zeros(xv.rows, xv.cols);
                let mut dgain = Tensor2D::zeros(1, xv.cols);
                let mut dbias = Tensor2D::zeros(1, xv.cols);
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dy = g.row(r);
                    let dxhat: Vec<f64> = dy.iter().zip(&gv.data).map(|(d, gn)| d * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xv.cols {
                        dx.set(r, c, rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat));
                        dgain.data[c] += dy[c] * xhat[c];
                        dbias.data[c] += dy[c];
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gain, dgain);
                add_to(grads, *bias, dbias);
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[*a].value;
                let mut d = g.clone();
                for (dv, &x) in d.data.iter_mut().zip(&xv.data) {
                    *dv *= gelu_grad(x);
                }
                add_to(grads, *a, d);
            }
            Op::Exp(a) => {
                add_to(grads, *a, g.mul_elem(&self.nodes[i].value).expect("shape"));
            }
            Op::SumAll(a) => {
                let t = &self.nodes[*a].value;
                let d = Tensor2D::from_vec(t.rows, t.cols, vec![g.data[0]; t.data.len()]);
                add_to(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let t = &self.nodes[*a].value;
                let scale = g.data[0] / t.data.len() as f64;
                let d = Tensor2D::from_vec(t.rows, t.cols, vec![scale; t.data.len()]);
                add_to(grads, *a, d);
            }
            Op::L2NormalizeRows(a) => {
                let xv = &self.nodes[*a].value;
                let yv = &self.nodes[i].value;
                let mut d = Tensor2D::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let norm = xv.row_l2_norm(r);
                    let dot: f64 = g.row(r).iter().zip(yv.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..xv.cols {
                        d.set(r, c, (g.get(r, c) - yv.get(r, c) * dot) / norm);
                    }
                }
                add_to(grads, *a, d);
            }
            Op::Rope { x, cos, sin } => {
                add_to(grads, *x, crate::tensor::rotate_pairs(g, cos, sin, true));
            }
            Op::GatherRows { table, idx } => {
                let t = &self.nodes[*table].value;
                let mut d = Tensor2D::zeros(t.rows, t.cols);
                for (i, &r) in idx.iter().enumerate() {
                    for c in 0..t.cols {
                        d.data[r * t.cols + c] += g.get(i, c);
                    }
                }
                add_to(grads, *table, d);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let t = &self.nodes[*logits].value;
                let scale = g.data[0] / targets.len() as f64;
                let mut d = Tensor2D::zeros(t.rows, t.cols);
                for (r, &target) in targets.iter().enumerate() {
                    let row = t.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..t.cols {
                        let p = exps[c] / sum;
                        d.set(r, c, scale * (p - if c == target { 1.0 } else { 0.0 }));
                    }
                }
                add_to(grads, *logits, d);
            }
        }
    }
}

fn gelu_forward(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
