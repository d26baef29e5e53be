use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

/// CSR sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 {
            return Err(Error::Shape(format!(
                "indptr of length {} for {rows} rows",
                indptr.len()
            )));
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) || indptr[rows] != indices.len() {
            return Err(Error::Contract("indptr must be non-decreasing and end at nnz".into()));
        }
        if values.len() != indices.len() {
            return Err(Error::Shape("indices and values differ in length".into()));
        }
        for r in 0..rows {
            let row = &indices[indptr[r]..indptr[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!("row {r} indices not strictly ascending")));
            }
            if let Some(&c) = row.last() {
                if c >= cols {
                    return Err(Error::Index(format!("column {c} in row {r}, width {cols}")));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if r >= rows || c >= cols {
                return Err(Error::Index(format!("entry ({r},{c}) in {rows}x{cols}")));
            }
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self::new(rows, cols, indptr, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |p| vals[p])
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                d.set(r, c, v);
            }
        }
        d
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                indices[next[c]] = r;
                values[next[c]] = v;
                next[c] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    /// `self · d`
    pub fn spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != d.rows() {
            return Err(Error::Shape(format!(
                "spmm {}x{} by {}x{}",
                self.rows,
                self.cols,
                d.rows(),
                d.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, d.cols());
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let out_row = out.row_mut(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (o, x) in out_row.iter_mut().zip(d.row(c)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g`, the backward of [`spmm`](Self::spmm) with respect to its dense input.
    pub fn spmm_t(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != g.rows() {
            return Err(Error::Shape(format!(
                "spmm_t {}x{} (transposed) by {}x{}",
                self.rows,
                self.cols,
                g.rows(),
                g.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(self.cols, g.cols());
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let g_row = g.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (o, x) in out.row_mut(c).iter_mut().zip(g_row) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_sparse(rows: usize, cols: usize, density: f64, seed: u64) -> SparseMatrix {
        let mut r = rng::stream(seed, &[]);
        let mut trip = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                if r.random::<f64>() < density {
                    trip.push((i, j, r.random_range(-1.0..1.0)));
                }
            }
        }
        SparseMatrix::from_triplets(rows, cols, &trip).unwrap()
    }

    fn random_dense(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut r = rng::stream(seed, &[]);
        DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_times_dense_is_exact() {
        let d = random_dense(6, 3, 1);
        assert_eq!(SparseMatrix::identity(6).spmm(&d).unwrap(), d);
    }

    #[test]
    fn spmm_matches_dense_oracle() {
        let s = random_sparse(5, 5, 0.5, 2);
        let d = random_dense(5, 3, 3);
        let oracle = DenseMatrix::from_fn(5, 3, |r, c| {
            (0..5).map(|k| s.get(r, k) * d.get(k, c)).sum()
        });
        assert!(s.spmm(&d).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn spmm_backward_matches_central_differences() {
        let s = random_sparse(5, 4, 0.6, 4);
        let d = random_dense(4, 3, 5);
        let w = random_dense(5, 3, 6);
        // loss = sum(w ⊙ (s·d)); dloss/dd = sᵀ·w
        let loss = |d: &DenseMatrix| -> f64 {
            let y = s.spmm(d).unwrap();
            y.values().iter().zip(w.values()).map(|(a, b)| a * b).sum()
        };
        let analytic = s.spmm_t(&w).unwrap();
        let h = 1e-5;
        for i in 0..d.values().len() {
            let mut plus = d.clone();
            plus.values_mut()[i] += h;
            let mut minus = d.clone();
            minus.values_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.values()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-6 || (a - numeric).abs() < 1e-10, "coord {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn transpose_matches_dense_transpose() {
        let s = random_sparse(7, 4, 0.4, 8);
        assert_eq!(s.transpose().to_dense(), s.to_dense().transpose());
        assert_eq!(s.transpose().transpose(), s);
    }

    #[test]
    fn rejects_bad_structure() {
        assert!(SparseMatrix::new(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::new(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::new(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        let s = SparseMatrix::identity(3);
        assert!(s.spmm(&DenseMatrix::zeros(2, 2)).is_err());
    }
}
