//! Dense f32 kernels: matrix multiply, row softmax, layer norm, GELU and
//! stable argsort. All results are deterministic for a fixed configuration;
//! the parallel matmul accumulates each output element in the same order as
//! the sequential loop, so thread count never changes a single bit.
//!
//! Arithmetic recipes are deliberately simple and documented because the
//! naive reference path in [`crate::reference`] mirrors them step by step:
//! per-element accumulation always runs over ascending indices, biases are
//! added after the accumulation finishes, and normalizations multiply by a
//! reciprocal computed once per row.

use crate::error::{Error, Result};
use crate::opcount;
use rayon::prelude::*;

/// Row-major f32 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// New matrix holding the listed rows, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Column slice `lo..hi` of every row, as a new matrix.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, hi - lo);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[lo..hi]);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    }
}

/// Work threshold below which matmul stays on the calling thread.
const PAR_MIN_OPS: usize = 1 << 18;

/// `a (m x k) * b (k x n)`. Accumulation runs over ascending `k` per output
/// element in both the sequential and the parallel path.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Config(format!(
            "matmul dimension mismatch: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    opcount::add((m * k * n) as u64);
    let mut out = Matrix::zeros(m, n);

    let body = |(orow, arow): (&mut [f32], &[f32])| {
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };

    if m * k * n < PAR_MIN_OPS {
        out.data
            .chunks_mut(n)
            .zip(a.data.chunks(k))
            .for_each(body);
    } else {
        out.data
            .par_chunks_mut(n)
            .zip(a.data.par_chunks(k))
            .for_each(body);
    }
    Ok(out)
}

/// `a (m x k) * b^T` where `b` is `n x k` row-major. Each output element is
/// a row-by-row dot product, accumulated over ascending `k`.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Config(format!(
            "matmul_transb dimension mismatch: {}x{} * ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    opcount::add((m * k * n) as u64);
    let mut out = Matrix::zeros(m, n);
    let body = |(orow, arow): (&mut [f32], &[f32])| {
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot_unc(arow, b.row(j));
        }
    };
    if m * k * n < PAR_MIN_OPS {
        out.data.chunks_mut(n).zip(a.data.chunks(k)).for_each(body);
    } else {
        out.data
            .par_chunks_mut(n)
            .zip(a.data.par_chunks(k))
            .for_each(body);
    }
    Ok(out)
}

#[inline]
fn dot_unc(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `x * w + bias`, bias added after the full accumulation.
pub fn linear(x: &Matrix, w: &Matrix, bias: &[f32]) -> Result<Matrix> {
    if bias.len() != w.cols {
        return Err(Error::Config(format!(
            "bias length {} does not match output width {}",
            bias.len(),
            w.cols
        )));
    }
    let mut out = matmul(x, w)?;
    for i in 0..out.rows {
        for (o, &b) in out.row_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Numerically stabilized row softmax. `-inf` entries map to exactly 0; a
/// row without any finite entry is an error.
pub fn row_softmax(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    row_softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn row_softmax_in_place(m: &mut Matrix) -> Result<()> {
    let cols = m.cols;
    opcount::add((m.rows * cols) as u64); // one normalize multiply per entry
    for i in 0..m.rows {
        let row = m.row_mut(i);
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            return Err(Error::EmptySoftmaxSupport { row: i });
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            let e = if *v == f32::NEG_INFINITY {
                0.0
            } else {
                (*v - max).exp()
            };
            *v = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// Per-row layer normalization followed by the affine transform.
/// Recipe: `mean = sum/n`, population variance, `inv = 1/sqrt(var + eps)`,
/// `out = ((x - mean) * inv) * gamma + beta`.
pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    let n = x.cols;
    if gamma.len() != n || beta.len() != n {
        return Err(Error::Config(format!(
            "layer_norm affine length {}/{} does not match width {n}",
            gamma.len(),
            beta.len()
        )));
    }
    opcount::add((x.rows * 3 * n) as u64);
    let mut out = Matrix::zeros(x.rows, n);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut sum = 0.0f32;
        for &v in row {
            sum += v;
        }
        let mean = sum / n as f32;
        let mut var = 0.0f32;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= n as f32;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = out.row_mut(i);
        for j in 0..n {
            orow[j] = ((row[j] - mean) * inv) * gamma[j] + beta[j];
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Tanh-form GELU applied in place.
pub fn gelu_in_place(m: &mut Matrix) {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    const CUBIC: f32 = 0.044_715;
    opcount::add((m.data.len() * 6) as u64);
    for v in &mut m.data {
        let x = *v;
        let x3 = x * x * x;
        let t = (SQRT_2_OVER_PI * (x + CUBIC * x3)).tanh();
        *v = 0.5 * x * (1.0 + t);
    }
}

/// Indices of `v` sorted by value descending; equal values keep ascending
/// index order (stable, lowest original index first).
pub fn argsort_desc(v: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if opcount::tie_break_fault() {
        idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(j.cmp(&i)));
    } else {
        idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]));
    }
    idx
}

/// Index of the largest value; the first occurrence wins on ties.
pub fn argmax_first(v: &[f32]) -> usize {
    debug_assert!(!v.is_empty());
    let fault = opcount::tie_break_fault();
    let mut best = 0;
    let mut best_v = v[0];
    for (i, &x) in v.iter().enumerate().skip(1) {
        let better = if fault { x >= best_v } else { x > best_v };
        if better {
            best = i;
            best_v = x;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.next_range(-1.0, 1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = SplitMix64::new(1);
        let m = random_matrix(&mut rng, 2, 2);
        let i = Matrix::identity(2);
        assert_eq!(matmul(&i, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut rng = SplitMix64::new(2);
        let m = random_matrix(&mut rng, 3, 4);
        let z = Matrix::zeros(2, 3);
        let c = matmul(&z, &m).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..5 {
            let a = random_matrix(&mut rng, 32, 32);
            let b = random_matrix(&mut rng, 32, 32);
            let v = random_matrix(&mut rng, 32, 1);
            let left = matmul(&matmul(&a, &b).unwrap(), &v).unwrap();
            let right = matmul(&a, &matmul(&b, &v).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let rel = (l - r).abs() / r.abs().max(1e-3);
                assert!(rel < 1e-4, "associativity drift {rel}");
            }
        }
    }

    #[test]
    fn parallel_matmul_is_bit_identical_to_sequential() {
        // 96x96x96 = 884736 ops, above the parallel threshold. Accumulate
        // by hand in the documented ascending-k order and compare bits.
        let mut rng = SplitMix64::new(77);
        let n = 96;
        let a = random_matrix(&mut rng, n, n);
        let b = random_matrix(&mut rng, n, n);
        let c = matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0f32;
                for k in 0..n {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(c.get(i, j).to_bits(), acc.to_bits(), "at ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_transb_matches_matmul() {
        let mut rng = SplitMix64::new(4);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 6, 7);
        let mut bt = Matrix::zeros(7, 6);
        for i in 0..6 {
            for j in 0..7 {
                bt.set(j, i, b.get(i, j));
            }
        }
        let c1 = matmul_transb(&a, &b).unwrap();
        let c2 = matmul(&a, &bt).unwrap();
        assert!(c1.max_abs_diff(&c2) == 0.0);
    }

    #[test]
    fn softmax_uniform() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let s = row_softmax(&m).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_two_entry() {
        let m = Matrix::from_rows(&[vec![0.9, 0.2]]);
        let s = row_softmax(&m).unwrap();
        assert!((s.get(0, 0) - 0.6682).abs() < 1e-3);
        assert!((s.get(0, 1) - 0.3318).abs() < 1e-3);
    }

    #[test]
    fn softmax_masked_entry() {
        let m = Matrix::from_rows(&[vec![1.3, f32::NEG_INFINITY]]);
        let s = row_softmax(&m).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_empty_support_is_error() {
        let m = Matrix::from_rows(&[vec![f32::NEG_INFINITY, f32::NEG_INFINITY]]);
        assert!(matches!(
            row_softmax(&m),
            Err(Error::EmptySoftmaxSupport { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let m = random_matrix(&mut rng, 8, 13);
            let s = row_softmax(&m).unwrap();
            for i in 0..8 {
                let sum: f32 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let m = Matrix::from_rows(&[vec![4.0, 4.0, 4.0]]);
        let out = layer_norm(&m, &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_two_values() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0]]);
        let out = layer_norm(&m, &[1.0; 2], &[0.0; 2], LAYER_NORM_EPS).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-5);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_beta_shift() {
        let m = Matrix::from_rows(&[vec![0.3, -2.0, 5.5]]);
        let out = layer_norm(&m, &[0.0; 3], &[2.5; 3], LAYER_NORM_EPS).unwrap();
        for &v in out.data() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn argsort_example() {
        assert_eq!(argsort_desc(&[0.9, 1.1, 0.0]), vec![1, 0, 2]);
    }

    #[test]
    fn argsort_stability() {
        assert_eq!(argsort_desc(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
        assert_eq!(argsort_desc(&[0.5]), vec![0]);
        assert_eq!(argsort_desc(&[2.0, 3.0, 2.0, 3.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn argsort_is_permutation() {
        let mut rng = SplitMix64::new(6);
        for _ in 0..100 {
            let v: Vec<f32> = (0..17).map(|_| (rng.next_u64() % 5) as f32).collect();
            let idx = argsort_desc(&v);
            let mut seen = vec![false; v.len()];
            for &i in &idx {
                assert!(!seen[i]);
                seen[i] = true;
            }
            for w in idx.windows(2) {
                let (a, b) = (w[0], w[1]);
                assert!(v[a] > v[b] || (v[a] == v[b] && a < b));
            }
        }
    }

    #[test]
    fn argmax_first_ties() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_first(&[f32::NEG_INFINITY, 0.0]), 1);
    }

    #[test]
    fn gelu_sanity() {
        let mut m = Matrix::from_rows(&[vec![0.0, 3.0, -3.0]]);
        gelu_in_place(&mut m);
        assert_eq!(m.get(0, 0), 0.0);
        assert!((m.get(0, 1) - 3.0).abs() < 2e-2);
        assert!(m.get(0, 2).abs() < 2e-2);
    }
}
