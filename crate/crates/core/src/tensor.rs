//! Dense row-major `f64` matrices and the handful of kernels the model needs.
//!
//! Products go through `matrixmultiply`'s blocked GEMM; everything else is a
//! straightforward loop. All functions are pure: inputs are borrowed and a new
//! matrix is returned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
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

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copy of columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Mat {
        assert!(start + width <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Mat {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Copy of rows `start..start + count`.
    pub fn row_block(&self, start: usize, count: usize) -> Mat {
        assert!(start + count <= self.rows, "row block out of range");
        Mat {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Side-by-side concatenation.
    pub fn hconcat(parts: &[Mat]) -> Result<Mat> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return shape_err("hconcat: row counts differ");
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn vstack(parts: &[Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return shape_err("vstack: column counts differ");
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row_assign(&mut self, row: &Mat) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return shape_err(format!(
                "row broadcast: {:?} onto {:?}",
                row.shape(),
                self.shape()
            ));
        }
        for chunk in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest elementwise absolute difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return shape_err(format!("matmul: {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        &mut c.data,
    );
    Ok(c)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_t(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return shape_err(format!("matmul_t: {:?} x {:?}ᵀ", a.shape(), b.shape()));
    }
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm(
        a.rows,
        a.cols,
        b.rows,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        &mut c.data,
    );
    Ok(c)
}

/// `aᵀ · b` without materialising the transpose.
pub fn t_matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return shape_err(format!("t_matmul: {:?}ᵀ x {:?}", a.shape(), b.shape()));
    }
    let mut c = Mat::zeros(a.cols, b.cols);
    gemm(
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        &mut c.data,
    );
    Ok(c)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() == m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and the contiguous row-major `c` (m x n); callers check the shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Boolean matrix marking entries excluded from a softmax (`true` = masked).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    masked: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != rows * cols {
            return shape_err("mask length does not match its shape");
        }
        Ok(Self { rows, cols, masked })
    }

    /// Causal mask aligned to the last key: query `i` sees keys `0..=i + (cols - rows)`.
    pub fn causal(rows: usize, cols: usize) -> Self {
        let offset = cols.saturating_sub(rows);
        let masked = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| j > i + offset))
            .collect();
        Self { rows, cols, masked }
    }

    #[inline]
    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.masked[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Row-wise softmax with max subtraction. Masked entries come out as exact zeros
/// and are left out of the normaliser.
pub fn softmax_rows(m: &Mat, mask: Option<&Mask>) -> Result<Mat> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return shape_err(format!("mask {:?} vs logits {:?}", mask.shape(), m.shape()));
        }
    }
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        match mask {
            None => softmax_in_place(row),
            Some(mask) => {
                let mut max = f64::NEG_INFINITY;
                for (j, &x) in row.iter().enumerate() {
                    if !mask.is_masked(i, j) && x > max {
                        max = x;
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow { row: i });
                }
                let mut sum = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    if mask.is_masked(i, j) {
                        *x = 0.0;
                    } else {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
        }
    }
    Ok(out)
}

/// Softmax over an entire slice in place. The slice must be non-empty.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row normalisation to zero mean and unit (eps-stabilised) variance,
/// followed by `gain ⊙ x + bias`.
pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Result<Mat> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return shape_err(format!(
            "layer_norm: gain {} / bias {} vs width {}",
            gain.len(),
            bias.len(),
            x.cols
        ));
    }
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let n = x.cols as f64;
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Seeded, platform-independent random source (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `lo..hi`.
    pub fn below(&mut self, lo: u64, hi: u64) -> u64 {
        use rand::Rng as _;
        self.inner.gen_range(lo..hi)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng as _;
        self.inner.gen::<f64>()
    }
}

pub fn seeded_gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Mat { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn identity_product() {
        let mut rng = Rng::new(3);
        let x = seeded_gaussian(3, 4, 1.0, &mut rng);
        assert_eq!(matmul(&Mat::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn scalar_product() {
        let a = Mat::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Mat::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = seeded_gaussian(5, 4, 1.0, &mut rng);
        let b = seeded_gaussian(4, 3, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        assert!(
            matmul_t(&a, &b.transpose())
                .unwrap()
                .max_abs_diff(&naive_matmul(&a, &b))
                <= 1e-12
        );
        assert!(
            t_matmul(&a.transpose(), &b)
                .unwrap()
                .max_abs_diff(&naive_matmul(&a, &b))
                <= 1e-12
        );
    }

    #[test]
    fn matmul_shape_error() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_constant_row() {
        let m = Mat::filled(1, 3, 4.2);
        let s = softmax_rows(&m, None).unwrap();
        for &x in s.as_slice() {
            assert!((x - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_row() {
        let m = Mat::row_vector(vec![0.0, std::f64::consts::LN_2]);
        let s = softmax_rows(&m, None).unwrap();
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() <= 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() <= 1e-15);
    }

    #[test]
    fn softmax_masked_entry_matches_two_term_formula() {
        let m = Mat::row_vector(vec![5.0, -1.0, 2.0]);
        let mask = Mask::new(1, 3, vec![false, false, true]).unwrap();
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        let (e0, e1) = (5f64.exp(), (-1f64).exp());
        assert!((s.get(0, 0) - e0 / (e0 + e1)).abs() <= 1e-12);
        assert!((s.get(0, 1) - e1 / (e0 + e1)).abs() <= 1e-12);
        assert_eq!(s.get(0, 2), 0.0);
    }

    #[test]
    fn softmax_fully_masked_row() {
        let m = Mat::zeros(2, 2);
        let mask = Mask::new(2, 2, vec![false, false, true, true]).unwrap();
        assert!(matches!(
            softmax_rows(&m, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let m = Mat::row_vector(vec![1e308, 1e308, -1e308]);
        let s = softmax_rows(&m, None).unwrap();
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Mat::filled(1, 4, 7.0);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardised_row() {
        // mean 0, population variance 1
        let row = [1.0, -1.0, 1.0, -1.0];
        let x = Mat::row_vector(row.to_vec());
        let gain = [2.0, 3.0, 0.5, 1.0];
        let bias = [0.1, 0.2, 0.3, 0.4];
        let y = layer_norm(&x, &gain, &bias, 1e-15).unwrap();
        for j in 0..4 {
            assert!((y.get(0, j) - (gain[j] * row[j] + bias[j])).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = Rng::new(5);
        let x = seeded_gaussian(3, 7, 2.0, &mut rng);
        let gain: Vec<f64> = (0..7).map(|i| 1.0 + i as f64 * 0.1).collect();
        let bias: Vec<f64> = (0..7).map(|i| i as f64 * -0.05).collect();
        let y = layer_norm(&x, &gain, &bias, 1e-6).unwrap();
        for i in 0..3 {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / 7.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            for j in 0..7 {
                let want = (r[j] - mean) / (var + 1e-6).sqrt() * gain[j] + bias[j];
                assert!((y.get(i, j) - want).abs() <= 1e-10);
            }
        }
        assert!(matches!(
            layer_norm(&x, &gain[..6], &bias, 1e-6),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gaussian_zero_std_and_determinism() {
        let z = seeded_gaussian(3, 3, 0.0, &mut Rng::new(1));
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let a = seeded_gaussian(10, 10, 1.0, &mut Rng::new(9));
        let b = seeded_gaussian(10, 10, 1.0, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_statistics() {
        let m = seeded_gaussian(100, 100, 1.0, &mut Rng::new(42));
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let std = (m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 5.0 / n.sqrt());
        assert!((0.9..=1.1).contains(&std));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let m = Mat::from_vec(3, 4, vals).unwrap();
            let s = softmax_rows(&m, Some(&Mask::causal(3, 4))).unwrap();
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let a = seeded_gaussian(4, 5, 1.0, &mut rng);
            let b = seeded_gaussian(5, 3, 1.0, &mut rng);
            let c = seeded_gaussian(3, 6, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }
    }
}
