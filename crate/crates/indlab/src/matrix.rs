//! Minimal dense linear algebra and masked-softmax kernels.
//!
//! Everything is `f64` and row-major. The multiplication kernels use fixed
//! summation order, so results are bit-reproducible across runs and thread
//! counts.

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Convenience constructor for literals in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, other: &Matrix, c: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// `self * other`, dimensions asserted. Use [`matmul`] for the checked API.
    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j order: streams over rows of `other`, vectorizes well.
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        out
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn mul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "mul_bt inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn mul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "mul_at inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a_ki) in a_row.iter().enumerate() {
                if a_ki == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ki * b;
                }
            }
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hcat row count");
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
            out.data[i * cols + self.cols..(i + 1) * cols].copy_from_slice(other.row(i));
        }
        out
    }
}

/// Dot product with four independent accumulators. The serial dependency
/// chain of a naive sum is the throughput bottleneck on every A * B^T
/// product; splitting it lets the partial sums pipeline. Summation order is
/// fixed, so results stay bit-reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let a_chunks = a.chunks_exact(4);
    let b_chunks = b.chunks_exact(4);
    let a_rem = a_chunks.remainder();
    let b_rem = b_chunks.remainder();
    for (ca, cb) in a_chunks.zip(b_chunks) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in a_rem.iter().zip(b_rem) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Causal masking variants for [`masked_softmax`].
///
/// `CausalInclusiveSelf` lets position i attend to j <= i (the standard
/// autoregressive mask). `CausalExclusiveSelf` restricts to j < i, which
/// leaves row 0 with no valid column; that row is emitted as all zeros, so
/// the attended value at row 0 is the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskMode {
    #[serde(rename = "inclusive")]
    CausalInclusiveSelf,
    #[serde(rename = "exclusive")]
    CausalExclusiveSelf,
}

impl MaskMode {
    /// Number of valid columns in row `i`.
    #[inline]
    pub fn valid_cols(&self, i: usize) -> usize {
        match self {
            MaskMode::CausalInclusiveSelf => i + 1,
            MaskMode::CausalExclusiveSelf => i,
        }
    }
}

/// Checked matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.mul(b))
}

/// Row-wise softmax over the causally unmasked prefix of each row.
///
/// Masked entries are exactly zero. Rows with at least one valid column sum
/// to one; rows with none (row 0 in exclusive mode) are all zeros. Logits are
/// stabilized by subtracting the row maximum over unmasked entries.
pub fn masked_softmax(scores: &Matrix, mode: MaskMode) -> Result<Matrix> {
    if scores.rows != scores.cols {
        return Err(Error::Shape(format!(
            "masked_softmax expects a square matrix, got {}x{}",
            scores.rows, scores.cols
        )));
    }
    if !scores.is_finite() {
        return Err(Error::Numerical("masked_softmax: non-finite scores".into()));
    }
    let n = scores.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let valid = mode.valid_cols(i);
        if valid == 0 {
            continue;
        }
        let row = scores.row(i);
        let max = row[..valid]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..valid {
            let e = (row[j] - max).exp();
            out_row[j] = e;
            sum += e;
        }
        for v in &mut out_row[..valid] {
            *v /= sum;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let prod = matmul(&Matrix::identity(3), &a).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_permutation_swaps_columns() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let prod = matmul(&a, &p).unwrap();
        assert_eq!(prod, Matrix::from_rows(&[&[2.0, 1.0], &[4.0, 3.0]]));
    }

    #[test]
    fn matmul_dimension_mismatch_is_an_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert!(matmul(&a, &b).is_err());
    }

    /// Naive triple-loop oracle, kept independent of the i-k-j kernel.
    fn matmul_naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn pseudo_random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        // Cheap LCG; only needs to be deterministic and non-degenerate.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let data: Vec<f64> = (0..rows * cols).map(|_| next()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let a = pseudo_random_matrix(5, 7, 11);
        let b = pseudo_random_matrix(7, 3, 12);
        let fast = matmul(&a, &b).unwrap();
        let slow = matmul_naive(&a, &b);
        // The summation order differs, so allow a few ulps.
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn transposed_variants_match_explicit_transposes() {
        let a = pseudo_random_matrix(4, 6, 21);
        let b = pseudo_random_matrix(5, 6, 22);
        let c = pseudo_random_matrix(4, 5, 23);
        let bt = a.mul_bt(&b);
        let expect = a.mul(&b.transpose());
        for (x, y) in bt.data().iter().zip(expect.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
        let at = a.mul_at(&c);
        let expect = a.transpose().mul(&c);
        for (x, y) in at.data().iter().zip(expect.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn softmax_equal_logits_inclusive() {
        let t = masked_softmax(&Matrix::zeros(3, 3), MaskMode::CausalInclusiveSelf).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 };
                assert_abs_diff_eq!(t.at(i, j), expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn softmax_equal_logits_exclusive_empty_first_row() {
        let t = masked_softmax(&Matrix::zeros(3, 3), MaskMode::CausalExclusiveSelf).unwrap();
        assert_eq!(t.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(t.row(1), &[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(t.at(2, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.at(2, 1), 0.5, epsilon = 1e-15);
        assert_eq!(t.at(2, 2), 0.0);
    }

    #[test]
    fn softmax_saturating_logit() {
        let mut s = Matrix::zeros(3, 3);
        s.set(2, 1, 50.0);
        let t = masked_softmax(&s, MaskMode::CausalInclusiveSelf).unwrap();
        // Direct evaluation: e^50 / (e^50 + 2) and 1 / (e^50 + 2).
        assert_abs_diff_eq!(t.at(2, 1), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.at(2, 0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.at(2, 2), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_non_square_and_non_finite() {
        assert!(masked_softmax(&Matrix::zeros(2, 3), MaskMode::CausalInclusiveSelf).is_err());
        let mut s = Matrix::zeros(2, 2);
        s.set(0, 0, f64::NAN);
        assert!(masked_softmax(&s, MaskMode::CausalInclusiveSelf).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            vals in proptest::collection::vec(-30.0f64..30.0, 25),
            exclusive in any::<bool>(),
        ) {
            let s = Matrix::from_vec(5, 5, vals).unwrap();
            let mode = if exclusive { MaskMode::CausalExclusiveSelf } else { MaskMode::CausalInclusiveSelf };
            let t = masked_softmax(&s, mode).unwrap();
            for i in 0..5 {
                let valid = mode.valid_cols(i);
                let sum: f64 = t.row(i).iter().sum();
                if valid == 0 {
                    prop_assert_eq!(sum, 0.0);
                } else {
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
                for j in 0..5 {
                    prop_assert!((0.0..=1.0).contains(&t.at(i, j)));
                    if j >= valid {
                        prop_assert_eq!(t.at(i, j), 0.0);
                    }
                }
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            vals in proptest::collection::vec(-20.0f64..20.0, 16),
            shift in -100.0f64..100.0,
        ) {
            let s = Matrix::from_vec(4, 4, vals).unwrap();
            let mut shifted = s.clone();
            for i in 0..4 {
                for j in 0..4 {
                    shifted.set(i, j, s.at(i, j) + shift);
                }
            }
            let a = masked_softmax(&s, MaskMode::CausalInclusiveSelf).unwrap();
            let b = masked_softmax(&shifted, MaskMode::CausalInclusiveSelf).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let a = pseudo_random_matrix(3, 4, seed);
            let b = pseudo_random_matrix(4, 5, seed.wrapping_add(1));
            let c = pseudo_random_matrix(5, 2, seed.wrapping_add(2));
            let left = a.mul(&b).mul(&c);
            let right = a.mul(&b.mul(&c));
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() / scale < 1e-9);
            }
        }
    }
}
