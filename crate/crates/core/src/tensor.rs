//! Dense row-major f64 matrices and the attention/normalization kernels
//! built on them. Everything here is pure and deterministic.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Additive mask value; large enough that `exp` underflows to exactly 0.0
/// after max-subtraction.
pub const MASK_NEG: f64 = -1e30;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor2D { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Tensor2D { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    /// `self · other`; i-k-j loop order keeps both operands streaming.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; both operands read row-major.
    pub fn matmul_transpose_b(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by {}x{}ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`; accumulates row-by-row so both operands stream.
    pub fn matmul_transpose_a(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_ta {}x{}ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let brow = other.row(i);
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn mul_elem(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, |a, b| a * b, "mul_elem")
    }

    fn zip_with(&self, other: &Tensor2D, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Tensor2D> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{what} {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor2D { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn row_l2_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Boolean attention mask; `true` means "may attend".
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub size: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// All-true mask of the given size.
    pub fn all_true(size: usize) -> Self {
        AttnMask { size, allowed: vec![true; size * size] }
    }

    /// Lower-triangular causal mask (diagonal included).
    pub fn causal(size: usize) -> Self {
        let mut m = AttnMask { size, allowed: vec![false; size * size] };
        for i in 0..size {
            for j in 0..=i {
                m.allowed[i * size + j] = true;
            }
        }
        m
    }

    #[inline]
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    /// Every token always attends to itself; blocking the diagonal is a bug.
    pub fn set(&mut self, i: usize, j: usize, allow: bool) {
        assert!(allow || i != j, "diagonal mask entries must stay true");
        self.allowed[i * self.size + j] = allow;
    }

    pub fn allowed_in_row(&self, i: usize) -> usize {
        (0..self.size).filter(|&j| self.is_allowed(i, j)).count()
    }
}

/// Row-wise softmax of `logits + mask` where blocked entries receive
/// [`MASK_NEG`]. Blocked positions come out exactly 0.0.
pub fn masked_softmax_rows(logits: &Tensor2D, mask: &AttnMask) -> Result<Tensor2D> {
    if logits.rows != mask.size || logits.cols != mask.size {
        return Err(Error::Shape(format!(
            "softmax logits {}x{} vs mask {}",
            logits.rows, logits.cols, mask.size
        )));
    }
    let n = mask.size;
    let mut out = Tensor2D::zeros(n, n);
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            let z = logits.get(i, j) + if mask.is_allowed(i, j) { 0.0 } else { MASK_NEG };
            if z > max {
                max = z;
            }
        }
        if max <= MASK_NEG / 2.0 {
            return Err(Error::Config(format!("mask row {i} has no allowed entries")));
        }
        let mut sum = 0.0;
        for j in 0..n {
            let z = logits.get(i, j) + if mask.is_allowed(i, j) { 0.0 } else { MASK_NEG };
            let e = (z - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..n {
            let v = out.get(i, j) / sum;
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Masked scaled-dot-product self-attention over a single sequence.
///
/// Returns `softmax((q·kᵀ)/√d + mask) · v`; blocked positions get exactly
/// zero weight, so perturbing `v` (or `k`) there cannot change the output.
pub fn masked_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, mask: &AttnMask) -> Result<Tensor2D> {
    if q.rows != mask.size || k.rows != mask.size || v.rows != mask.size {
        return Err(Error::Shape(format!(
            "attention rows q={} k={} v={} vs mask {}",
            q.rows, k.rows, v.rows, mask.size
        )));
    }
    if q.cols != k.cols {
        return Err(Error::Shape(format!("attention q cols {} vs k cols {}", q.cols, k.cols)));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let logits = q.matmul_transpose_b(k)?.scale(scale);
    let weights = masked_softmax_rows(&logits, mask)?;
    weights.matmul(v)
}

/// Rotate consecutive column pairs of `x`: pair p of row r turns by the
/// angle whose cosine/sine sit at `(r, p)`. `inverse` applies the opposite
/// rotation (used by the backward pass).
pub fn rotate_pairs(x: &Tensor2D, cos: &Tensor2D, sin: &Tensor2D, inverse: bool) -> Tensor2D {
    assert_eq!(x.cols % 2, 0, "rotate_pairs needs an even column count");
    assert_eq!(cos.rows, x.rows);
    assert_eq!(cos.cols, x.cols / 2);
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..x.rows {
        for p in 0..x.cols / 2 {
            let (c, s) = (cos.get(r, p), sign * sin.get(r, p));
            let (a, b) = (x.get(r, 2 * p), x.get(r, 2 * p + 1));
            out.set(r, 2 * p, a * c - b * s);
            out.set(r, 2 * p + 1, a * s + b * c);
        }
    }
    out
}

/// Per-row layer normalization: zero mean, unit variance (population),
/// then `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor2D, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor2D> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias len {}/{} vs cols {}",
            gain.len(),
            bias.len(),
            x.cols
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let n = x.cols as f64;
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..x.cols {
            out.set(i, j, (row[j] - mean) * rstd * gain[j] + bias[j]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor2D {
        Tensor2D::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_matches_naive_order() {
        let mut rng = crate::rng::DetRng::from_seed(11);
        let a = Tensor2D::from_vec(5, 7, rng.normal_vec(35, 1.0));
        let b = Tensor2D::from_vec(7, 3, rng.normal_vec(21, 1.0));
        let fast = a.matmul(&b).unwrap();
        let mut naive = Tensor2D::zeros(5, 3);
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                naive.set(i, j, acc);
            }
        }
        assert!(fast.max_abs_diff(&naive) < 1e-12);
    }

    #[test]
    fn zero_logits_give_uniform_over_allowed() {
        // q all-zero: row 0 may see {0,1} only, v rows (2,),(4,),(6,).
        let q = Tensor2D::zeros(3, 1);
        let k = Tensor2D::zeros(3, 1);
        let v = col(&[2.0, 4.0, 6.0]);
        let mut mask = AttnMask::all_true(3);
        mask.set(0, 2, false);
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((out.get(1, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_softmax_is_identity() {
        let q = Tensor2D::from_vec(1, 2, vec![0.3, -0.7]);
        let k = Tensor2D::from_vec(1, 2, vec![1.5, 0.2]);
        let v = Tensor2D::from_vec(1, 1, vec![7.0]);
        let out = masked_attention(&q, &k, &v, &AttnMask::all_true(1)).unwrap();
        assert_eq!(out.get(0, 0), 7.0);
    }

    // Two-way softmax oracle frozen before the implementation existed:
    // logits row 0 = (0.5, 1.0, blocked), weights = softmax(0.5, 1.0),
    // output = w0*2 + w1*4 = 3.244918662403709.
    #[test]
    fn three_token_hand_oracle() {
        let q = col(&[1.0, 0.0, 0.0]);
        let k = col(&[0.5, 1.0, 2.0]);
        let v = col(&[2.0, 4.0, 6.0]);
        let mut mask = AttnMask::all_true(3);
        mask.set(0, 2, false);
        let out = masked_attention(&q, &k, &v, &mask).unwrap();

        // Independent recomputation (scale = 1/sqrt(1) = 1).
        let (e0, e1) = (0.5f64.exp(), 1.0f64.exp());
        let oracle = (e0 * 2.0 + e1 * 4.0) / (e0 + e1);
        assert!((out.get(0, 0) - oracle).abs() < 1e-12);
        assert!((out.get(0, 0) - 3.244918662403709).abs() < 1e-12);
    }

    #[test]
    fn all_true_mask_equals_unmasked_attention() {
        let mut rng = crate::rng::DetRng::from_seed(5);
        let q = Tensor2D::from_vec(6, 4, rng.normal_vec(24, 1.0));
        let k = Tensor2D::from_vec(6, 4, rng.normal_vec(24, 1.0));
        let v = Tensor2D::from_vec(6, 4, rng.normal_vec(24, 1.0));
        let masked = masked_attention(&q, &k, &v, &AttnMask::all_true(6)).unwrap();

        // Plain attention written independently.
        let scale = 0.5;
        let logits = q.matmul_transpose_b(&k).unwrap().scale(scale);
        let mut weights = Tensor2D::zeros(6, 6);
        for i in 0..6 {
            let m = logits.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.row(i).iter().map(|&z| (z - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..6 {
                weights.set(i, j, exps[j] / s);
            }
        }
        let plain = weights.matmul(&v).unwrap();
        assert!(masked.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn masked_value_perturbation_has_no_effect() {
        let mut rng = crate::rng::DetRng::from_seed(9);
        let q = Tensor2D::from_vec(4, 3, rng.normal_vec(12, 1.0));
        let k = Tensor2D::from_vec(4, 3, rng.normal_vec(12, 1.0));
        let mut v = Tensor2D::from_vec(4, 3, rng.normal_vec(12, 1.0));
        let mut mask = AttnMask::all_true(4);
        mask.set(0, 3, false);
        let before = masked_attention(&q, &k, &v, &mask).unwrap();
        for j in 0..3 {
            v.set(3, j, v.get(3, j) + 1e6);
        }
        let after = masked_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(before.row(0), after.row(0));
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let mut rng = crate::rng::DetRng::from_seed(13);
        let logits = Tensor2D::from_vec(5, 5, rng.normal_vec(25, 2.0));
        let mut mask = AttnMask::all_true(5);
        mask.set(2, 0, false);
        mask.set(2, 4, false);
        let w = masked_softmax_rows(&logits, &mask).unwrap();
        for i in 0..5 {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for j in 0..5 {
                if !mask.is_allowed(i, j) {
                    assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let q = Tensor2D::zeros(3, 2);
        let k = Tensor2D::zeros(3, 4);
        let v = Tensor2D::zeros(3, 2);
        let err = masked_attention(&q, &k, &v, &AttnMask::all_true(3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn layer_norm_constant_row_is_all_bias() {
        let x = Tensor2D::from_vec(1, 4, vec![5.0, 5.0, 5.0, 5.0]);
        let out = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        for j in 0..4 {
            assert!(out.get(0, j).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let x = Tensor2D::from_vec(1, 2, vec![1.0, -1.0]);
        let out = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-6);
        assert!((out.get(0, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        // Row (0,2), gain 2, bias 1: mean 1, var 1, out = 1 ± 2/sqrt(1+eps).
        let eps = 1e-5;
        let x = Tensor2D::from_vec(1, 2, vec![0.0, 2.0]);
        let out = layer_norm(&x, &[2.0, 2.0], &[1.0, 1.0], eps).unwrap();
        let delta = 2.0 / (1.0 + eps).sqrt();
        assert!((out.get(0, 0) - (1.0 - delta)).abs() < 1e-12);
        assert!((out.get(0, 1) - (1.0 + delta)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_variance_uses_eps() {
        let x = Tensor2D::from_vec(1, 3, vec![2.0, 2.0, 2.0]);
        let out = layer_norm(&x, &[1.0; 3], &[0.5; 3], 1e-5).unwrap();
        assert!(out.is_finite());
        for j in 0..3 {
            assert!((out.get(0, j) - 0.5).abs() < 1e-12);
        }
    }
}
