use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.values.len() <= 64 {
            let rows: Vec<&[f64]> = (0..self.rows).map(|r| self.row(r)).collect();
            write!(f, " {rows:?}")?;
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    fn gemm(
        a: &DenseMatrix,
        trans_a: bool,
        b: &DenseMatrix,
        trans_b: bool,
        out: &mut DenseMatrix,
        beta: f64,
    ) -> Result<()> {
        let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
        if k != kb || out.rows != m || out.cols != n {
            return Err(Error::Shape(format!(
                "gemm {m}x{k} by {kb}x{n} into {}x{}",
                out.rows, out.cols
            )));
        }
        if m == 0 || n == 0 {
            return Ok(());
        }
        if k == 0 {
            out.values.iter_mut().for_each(|x| *x *= beta);
            return Ok(());
        }
        let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        // SAFETY: strides and dimensions describe exactly the owned buffers checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.values.as_ptr(),
                rsa,
                csa,
                b.values.as_ptr(),
                rsb,
                csb,
                beta,
                out.values.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        Self::gemm(self, false, other, false, &mut out, 0.0)?;
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        Self::gemm(self, true, other, false, &mut out, 0.0)?;
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        Self::gemm(self, false, other, true, &mut out, 0.0)?;
        Ok(out)
    }

    /// `acc += aᵀ · b`
    pub fn accumulate_t_matmul(acc: &mut DenseMatrix, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
        Self::gemm(a, true, b, false, acc, 1.0)
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|x| *x *= s);
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    pub fn gather_rows(&self, rows: &[usize]) -> DenseMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        DenseMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
        }
    }

    /// `self[rows[i]] += src[i]` for every i.
    pub fn scatter_add_rows(&mut self, rows: &[usize], src: &DenseMatrix) -> Result<()> {
        if rows.len() != src.rows || src.cols != self.cols {
            return Err(Error::Shape(format!(
                "scatter {} rows of width {} into width {}",
                rows.len(),
                src.cols,
                self.cols
            )));
        }
        for (i, &r) in rows.iter().enumerate() {
            for (a, b) in self.row_mut(r).iter_mut().zip(src.row(i)) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hcat(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("hcat with differing row counts".into()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> Result<DenseMatrix> {
        if start > end || end > self.cols {
            return Err(Error::Shape(format!(
                "columns {start}..{end} of width {}",
                self.cols
            )));
        }
        let mut values = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            values.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: end - start,
            values,
        })
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> DenseMatrix {
        DenseMatrix {
            rows: end - start,
            cols: self.cols,
            values: self.values[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(a.rows(), b.cols(), |r, c| {
            (0..a.cols()).map(|k| a.get(r, k) * b.get(k, c)).sum()
        })
    }

    #[test]
    fn gemm_variants_match_naive() {
        let a = DenseMatrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.5 - 1.0);
        let b = DenseMatrix::from_fn(3, 5, |r, c| (r as f64 - c as f64) * 0.25);
        let expect = naive(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&expect) < 1e-12);
        assert!(a.transpose().t_matmul(&b).unwrap().max_abs_diff(&expect) < 1e-12);
        assert!(a.matmul_t(&b.transpose()).unwrap().max_abs_diff(&expect) < 1e-12);
        let mut acc = DenseMatrix::identity(3);
        DenseMatrix::accumulate_t_matmul(&mut acc, &a, &a).unwrap();
        let mut expect_acc = naive(&a.transpose(), &a);
        expect_acc.add_assign(&DenseMatrix::identity(3)).unwrap();
        assert!(acc.max_abs_diff(&expect_acc) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DenseMatrix::hcat(&[&a, &DenseMatrix::zeros(3, 1)]).is_err());
    }

    #[test]
    fn hcat_and_slice_are_inverse() {
        let a = DenseMatrix::from_fn(3, 2, |r, c| (r + 10 * c) as f64);
        let b = DenseMatrix::from_fn(3, 4, |r, c| -((r * c) as f64));
        let cat = DenseMatrix::hcat(&[&a, &b]).unwrap();
        assert_eq!(cat.column_slice(0, 2).unwrap(), a);
        assert_eq!(cat.column_slice(2, 6).unwrap(), b);
    }

    #[test]
    fn gather_scatter() {
        let a = DenseMatrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let g = a.gather_rows(&[2, 0, 2]);
        assert_eq!(g.row(0), &[4.0, 5.0]);
        let mut acc = DenseMatrix::zeros(3, 2);
        acc.scatter_add_rows(&[2, 0, 2], &g).unwrap();
        assert_eq!(acc.row(2), &[8.0, 10.0]);
        assert_eq!(acc.row(1), &[0.0, 0.0]);
    }
}
