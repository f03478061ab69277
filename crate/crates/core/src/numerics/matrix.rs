//! Row-major dense `f64` matrix and the forward kernels used throughout the crate.

use crate::error::{Error, Result};

/// Lower clamp on the norm product in cosine similarity so zero rows stay finite.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Per-row Top-K selection: column indices and the values found there,
/// both ordered from largest to smallest value.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub indices: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Param {
                op: "Matrix::new",
                msg: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for
    /// literals in tests and docs.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Matrix {
        self.map(|v| v + s)
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape("add_row", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Multiplies row `r` by `col[r]` for a `rows x 1` column vector.
    pub fn mul_col(&self, col: &Matrix) -> Result<Matrix> {
        if col.cols != 1 || col.rows != self.rows {
            return Err(Error::shape("mul_col", self.shape(), col.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let s = col.data[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    /// Row-wise `log(sum(exp(x)))` as a `rows x 1` column.
    pub fn logsumexp_rows(&self) -> Matrix {
        Matrix::from_fn(self.rows, 1, |r, _| logsumexp(self.row(r)))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        out
    }

    pub fn sigmoid(&self) -> Matrix {
        self.map(sigmoid)
    }

    pub fn gelu(&self) -> Matrix {
        self.map(gelu)
    }

    /// Mean over rows, giving a `1 x cols` row.
    pub fn mean_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Per-row Top-K. Ties go to the lowest column index.
    pub fn topk_rows(&self, k: usize) -> Result<TopK> {
        if k == 0 || k > self.cols {
            return Err(Error::Param {
                op: "topk_rows",
                msg: format!("k={k} outside 1..={}", self.cols),
            });
        }
        let mut indices = Vec::with_capacity(self.rows);
        let mut values = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let idx = topk_indices(self.row(r), k);
            values.push(idx.iter().map(|&c| self.get(r, c)).collect());
            indices.push(idx);
        }
        Ok(TopK { indices, values })
    }

    /// `out[i][j] = <a_i, b_j> / max(|a_i| |b_j|, eps)`.
    pub fn cosine_sim(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("cosine_sim", self.shape(), other.shape()));
        }
        let na: Vec<f64> = (0..self.rows).map(|i| norm(self.row(i))).collect();
        let nb: Vec<f64> = (0..other.rows).map(|j| norm(other.row(j))).collect();
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j)) / (na[i] * nb[j]).max(COSINE_EPS)
        }))
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("concat_rows", (rows, cols), p.shape()));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::Param {
                    op: "gather_rows",
                    msg: format!("row {i} out of {}", self.rows),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.rows {
            return Err(Error::Param {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {}", start + len, self.rows),
            });
        }
        Ok(Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(COSINE_EPS)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Indices of the `k` largest entries, largest first, lowest index on ties.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(row.len());
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (j, &v) in row.iter().enumerate() {
        if best.len() == k && k > 0 && v.total_cmp(&row[best[k - 1]]).is_le() {
            continue;
        }
        // scanning in index order, so an equal value goes after existing ones
        let pos = best.partition_point(|&b| row[b].total_cmp(&v).is_ge());
        best.insert(pos, j);
        best.truncate(k);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 4, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let got = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((got.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = Matrix::from_rows(&[[0.0; 4]]).softmax_rows();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let row = [2.0, 1.0, 0.0, -1.0];
        let s = Matrix::from_rows(&[row]).softmax_rows();
        let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
        for (i, v) in row.iter().enumerate() {
            assert!((s.get(0, i) - v.exp() / z).abs() < 1e-12);
        }

        let shifted = Matrix::from_rows(&[row.map(|v| v + 37.5)]).softmax_rows();
        assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = Matrix::from_rows(&[[1000.0, 999.0, -1000.0]]).softmax_rows();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-2.0) - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-30.0..30.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
            assert!(sigmoid(x) > 0.0 && sigmoid(x) < 1.0);
        }
    }

    #[test]
    fn topk_examples() {
        let t = Matrix::from_rows(&[[0.1, 0.4, 0.3, 0.2]]).topk_rows(2).unwrap();
        assert_eq!(t.indices[0], vec![1, 2]);
        assert_eq!(t.values[0], vec![0.4, 0.3]);

        let t = Matrix::from_rows(&[[0.7; 4]]).topk_rows(2).unwrap();
        assert_eq!(t.indices[0], vec![0, 1]);

        assert!(Matrix::zeros(1, 4).topk_rows(0).is_err());
        assert!(Matrix::zeros(1, 4).topk_rows(5).is_err());
    }

    #[test]
    fn topk_matches_full_sort_on_1000_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let cols = rng.random_range(1..9);
            let k = rng.random_range(1..=cols);
            // small integer grid makes ties common
            let m = Matrix::from_fn(1, cols, |_, _| rng.random_range(0..4) as f64);
            let got = m.topk_rows(k).unwrap();
            let mut pairs: Vec<(f64, usize)> = m.row(0).iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            assert_eq!(got.indices[0], want);
        }
    }

    #[test]
    fn cosine_examples() {
        let v = Matrix::from_rows(&[[0.6, 0.8, 0.0]]);
        assert!((v.cosine_sim(&v).unwrap().get(0, 0) - 1.0).abs() < 1e-9);

        let e = Matrix::identity(3);
        let s = e.cosine_sim(&e).unwrap();
        assert!(s.get(0, 1).abs() < 1e-12 && s.get(2, 0).abs() < 1e-12);

        let z = Matrix::zeros(1, 3);
        assert_eq!(z.cosine_sim(&v).unwrap().get(0, 0), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(3, 4, &mut rng);
        let b = random(5, 4, &mut rng);
        let s = a.cosine_sim(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut d = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..4 {
                    d += a.get(i, k) * b.get(j, k);
                    na += a.get(i, k) * a.get(i, k);
                    nb += b.get(j, k) * b.get(j, k);
                }
                let want = d / (na.sqrt() * nb.sqrt()).max(1e-8);
                assert!((s.get(i, j) - want).abs() < 1e-10);
            }
        }
        assert!(Matrix::zeros(1, 3).cosine_sim(&Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let s = Matrix::from_rows(&[row]).softmax_rows();
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn softmax_is_monotone(row in prop::collection::vec(-10.0f64..10.0, 2..8)) {
            let s = Matrix::from_rows(&[row.clone()]).softmax_rows();
            for i in 0..row.len() {
                for j in 0..row.len() {
                    if row[i] > row[j] {
                        prop_assert!(s.get(0, i) >= s.get(0, j));
                    }
                }
            }
        }
    }
}
