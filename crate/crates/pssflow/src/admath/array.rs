use crate::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Batches of hypercube points are stored one point per row; network
/// activations are one sample per row, one unit per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Array2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Array2::new",
                format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Array2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Array2 { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Array2 { rows, cols, data }
    }

    /// Single row from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        Array2 { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Array2) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array2 {
        Array2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array2, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array2> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Array2 { rows: self.rows, cols: self.cols, data })
    }

    pub fn all_finite(&self) -> bool {
        // abs-sum folds NaN and infinity into the accumulator and lets the
        // loop vectorize, unlike an early-exit scan
        let mut acc = 0.0f64;
        for v in &self.data {
            acc += v.abs();
        }
        acc.is_finite()
    }

    /// Uninitialized buffer for outputs that every element of is written
    /// before use (dgemm with beta = 0, fused normalization loops).
    pub(crate) fn uninit(rows: usize, cols: usize) -> Array2 {
        let len = rows * cols;
        let mut data = Vec::with_capacity(len);
        #[allow(clippy::uninit_vec)]
        unsafe {
            data.set_len(len);
        }
        Array2 { rows, cols, data }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Per-column mean over rows; result is `1 x cols`.
    pub fn col_mean(&self) -> Array2 {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            for (acc, &v) in out.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        for v in &mut out {
            *v *= inv;
        }
        Array2 { rows: 1, cols: self.cols, data: out }
    }

    /// Per-row sum over columns; result is `rows x 1`.
    pub fn row_sum(&self) -> Array2 {
        let data = (0..self.rows)
            .map(|r| self.row(r).iter().sum())
            .collect();
        Array2 { rows: self.rows, cols: 1, data }
    }

    pub fn mean_all(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl std::ops::Index<(usize, usize)> for Array2 {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Array2 {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `op(a) * op(b)` where `op` is optional transposition, via the blocked
/// dgemm kernel. Accumulation order per output element is fixed by the
/// kernel, so results are reproducible run to run.
pub fn gemm(a: &Array2, trans_a: bool, b: &Array2, trans_b: bool) -> Result<Array2> {
    let (m, ka) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb {
        return Err(Error::shape(
            "gemm",
            format!(
                "inner dims {} vs {} (a {}x{}{}, b {}x{}{})",
                ka,
                kb,
                a.rows,
                a.cols,
                if trans_a { " transposed" } else { "" },
                b.rows,
                b.cols,
                if trans_b { " transposed" } else { "" }
            ),
        ));
    }
    // beta = 0 below: dgemm writes every element of the output
    let mut out = Array2::uninit(m, n);
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// `ln |det A|` of a small square matrix by Gaussian elimination with
/// partial pivoting. Used to validate analytic log-determinants against
/// numerically assembled Jacobians.
pub fn log_abs_det(a: &Array2) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(Error::shape(
            "log_abs_det",
            format!("{}x{} is not square", a.rows(), a.cols()),
        ));
    }
    let n = a.rows();
    let mut m = a.data.clone();
    let mut acc = 0.0f64;
    for k in 0..n {
        let mut piv = k;
        for r in k + 1..n {
            if m[r * n + k].abs() > m[piv * n + k].abs() {
                piv = r;
            }
        }
        if m[piv * n + k] == 0.0 {
            return Err(Error::invalid("log_abs_det", "singular matrix"));
        }
        if piv != k {
            for c in 0..n {
                m.swap(k * n + c, piv * n + c);
            }
        }
        let d = m[k * n + k];
        acc += d.abs().ln();
        for r in k + 1..n {
            let f = m[r * n + k] / d;
            for c in k..n {
                m[r * n + c] -= f * m[k * n + c];
            }
        }
    }
    Ok(acc)
}
