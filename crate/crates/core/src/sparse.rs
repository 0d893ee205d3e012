//! Compressed sparse row storage and the exact kernels built on it.
//!
//! Every matrix in this crate is square. Column indices are sorted and
//! unique within each row; explicit zeros are kept, so pattern membership
//! is independent of the stored value.

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

/// Largest dimension that may be expanded into dense storage by default.
pub const DEFAULT_DENSE_CAP: usize = 2_000;

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a canonical matrix from coordinate triples, summing duplicates.
    pub fn from_coo(n: usize, triples: &[(usize, usize, f64)]) -> Result<Self> {
        for &(row, col, _) in triples {
            if row >= n || col >= n {
                return Err(Error::IndexOutOfRange { row, col, n });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triples.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (row, col, value) in sorted {
            if last == Some((row, col)) {
                *values.last_mut().unwrap() += value;
                continue;
            }
            col_idx.push(col);
            values.push(value);
            row_ptr[row + 1] += 1;
            last = Some((row, col));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Wraps raw CSR arrays after checking every structural invariant.
    pub fn from_raw(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n + 1 {
            return Err(Error::InvalidStructure(format!(
                "row_ptr has length {}, expected {}",
                row_ptr.len(),
                n + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr[n] != col_idx.len() || col_idx.len() != values.len() {
            return Err(Error::InvalidStructure(
                "row_ptr endpoints disagree with nnz".into(),
            ));
        }
        for i in 0..n {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(Error::InvalidStructure(format!(
                    "row_ptr decreases at row {i}"
                )));
            }
            let cols = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            for (k, &c) in cols.iter().enumerate() {
                if c >= n {
                    return Err(Error::IndexOutOfRange { row: i, col: c, n });
                }
                if k > 0 && cols[k - 1] >= c {
                    return Err(Error::InvalidStructure(format!(
                        "columns not strictly increasing in row {i}"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    /// Keeps every nonzero of a square dense matrix.
    pub fn from_dense(dense: &DenseMatrix) -> Result<Self> {
        if dense.n_rows() != dense.n_cols() {
            return Err(Error::DimensionMismatch {
                expected: dense.n_rows(),
                found: dense.n_cols(),
            });
        }
        let n = dense.n_rows();
        let mut triples = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = dense.get(i, j);
                if v != 0.0 {
                    triples.push((i, j, v));
                }
            }
        }
        Self::from_coo(n, &triples)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::DimensionMismatch {
                expected: self.nnz(),
                found: values.len(),
            });
        }
        Ok(Self {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        })
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    /// Storage position of entry (i, j), if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.col_idx[start..self.row_ptr[i + 1]]
            .binary_search(&j)
            .ok()
            .map(|k| start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.position(i, j).map(|k| self.values[k])
    }

    /// Stored diagonal, with 0 for positions absent from the pattern.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i).unwrap_or(0.0)).collect()
    }

    /// Iterates `(row, col, value)` in storage order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    /// `y = A x`, each row accumulated left to right.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: x.len(),
            });
        }
        let mut y = vec![0.0; self.n];
        self.spmv_into(x, &mut y);
        Ok(y)
    }

    /// Unchecked variant of [`CsrMatrix::spmv`] writing into `y`.
    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    /// `y = Aᵀ x`.
    pub fn spmv_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: x.len(),
            });
        }
        let mut y = vec![0.0; self.n];
        for (i, &xi) in x.iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.values[k] * xi;
            }
        }
        Ok(y)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Pattern ∪ diagonal; inserted diagonal entries hold 0.
    pub fn add_missing_diagonal(&self) -> Self {
        let n = self.n;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(self.nnz() + n);
        let mut values = Vec::with_capacity(self.nnz() + n);
        row_ptr.push(0);
        for i in 0..n {
            let (cols, vals) = self.row(i);
            let mut inserted = false;
            for (&c, &v) in cols.iter().zip(vals) {
                if !inserted && c >= i {
                    if c != i {
                        col_idx.push(i);
                        values.push(0.0);
                    }
                    inserted = true;
                }
                col_idx.push(c);
                values.push(v);
            }
            if !inserted {
                col_idx.push(i);
                values.push(0.0);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Entries with `col <= row`.
    pub fn lower_part(&self) -> Self {
        self.filter(|i, j| j <= i)
    }

    /// Entries with `col >= row`.
    pub fn upper_part(&self) -> Self {
        self.filter(|i, j| j >= i)
    }

    fn filter(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if keep(i, c) {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n: self.n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut counts = vec![0usize; n + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = self.col_idx[k];
                col_idx[next[c]] = i;
                values[next[c]] = self.values[k];
                next[c] += 1;
            }
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Exact sparse product `self · rhs` over the full fill pattern.
    pub fn matmul(&self, rhs: &CsrMatrix) -> Result<Self> {
        if rhs.n != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: rhs.n,
            });
        }
        let n = self.n;
        let mut acc = vec![0.0; n];
        let mut marker = vec![usize::MAX; n];
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut touched = Vec::new();
        for i in 0..n {
            touched.clear();
            let (a_cols, a_vals) = self.row(i);
            for (&k, &aik) in a_cols.iter().zip(a_vals) {
                let (b_cols, b_vals) = rhs.row(k);
                for (&j, &bkj) in b_cols.iter().zip(b_vals) {
                    if marker[j] != i {
                        marker[j] = i;
                        acc[j] = 0.0;
                        touched.push(j);
                    }
                    acc[j] += aik * bkj;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                col_idx.push(j);
                values.push(acc[j]);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// `alpha·self + beta·rhs` over the union pattern.
    pub fn axpby(&self, alpha: f64, rhs: &CsrMatrix, beta: f64) -> Result<Self> {
        if rhs.n != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: rhs.n,
            });
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.n {
            let (ac, av) = self.row(i);
            let (bc, bv) = rhs.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ac.len() || q < bc.len() {
                let take_a = q >= bc.len() || (p < ac.len() && ac[p] <= bc[q]);
                let take_b = p >= ac.len() || (q < bc.len() && bc[q] <= ac[p]);
                let col = if take_a { ac[p] } else { bc[q] };
                let mut v = 0.0;
                if take_a {
                    v += alpha * av[p];
                    p += 1;
                }
                if take_b {
                    v += beta * bv[q];
                    q += 1;
                }
                col_idx.push(col);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n: self.n,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Symmetric relabelling `Q A Qᵀ`: entry (i, j) moves to (perm[i], perm[j]).
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: perm.len(),
            });
        }
        let triples: Vec<_> = self.triples().map(|(i, j, v)| (perm[i], perm[j], v)).collect();
        Self::from_coo(self.n, &triples)
    }

    /// Solves `L v = b` for a lower-triangular pattern with stored diagonal.
    pub fn lower_tri_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let mut v = b.to_vec();
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut diag = 0.0;
            let mut acc = v[i];
            for (&c, &x) in cols.iter().zip(vals) {
                if c < i {
                    acc -= x * v[c];
                } else if c == i {
                    diag = x;
                } else {
                    return Err(Error::InvalidStructure(format!(
                        "entry ({i}, {c}) above the diagonal of a lower factor"
                    )));
                }
            }
            if diag == 0.0 {
                return Err(Error::SingularFactor { row: i });
            }
            v[i] = acc / diag;
        }
        Ok(v)
    }

    /// Solves `U v = b` for an upper-triangular pattern with stored diagonal.
    pub fn upper_tri_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let mut v = b.to_vec();
        for i in (0..self.n).rev() {
            let (cols, vals) = self.row(i);
            let mut diag = 0.0;
            let mut acc = v[i];
            for (&c, &x) in cols.iter().zip(vals) {
                if c > i {
                    acc -= x * v[c];
                } else if c == i {
                    diag = x;
                } else {
                    return Err(Error::InvalidStructure(format!(
                        "entry ({i}, {c}) below the diagonal of an upper factor"
                    )));
                }
            }
            if diag == 0.0 {
                return Err(Error::SingularFactor { row: i });
            }
            v[i] = acc / diag;
        }
        Ok(v)
    }

    /// Solves `Lᵀ v = b` using the row storage of a lower factor.
    pub fn lower_tri_solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let mut v = b.to_vec();
        for i in (0..self.n).rev() {
            let diag = self.get(i, i).unwrap_or(0.0);
            if diag == 0.0 {
                return Err(Error::SingularFactor { row: i });
            }
            v[i] /= diag;
            let vi = v[i];
            let (cols, vals) = self.row(i);
            for (&c, &x) in cols.iter().zip(vals) {
                if c < i {
                    v[c] -= x * vi;
                }
            }
        }
        Ok(v)
    }

    /// Solves `Uᵀ v = b` using the row storage of an upper factor.
    pub fn upper_tri_solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let mut v = b.to_vec();
        for i in 0..self.n {
            let diag = self.get(i, i).unwrap_or(0.0);
            if diag == 0.0 {
                return Err(Error::SingularFactor { row: i });
            }
            v[i] /= diag;
            let vi = v[i];
            let (cols, vals) = self.row(i);
            for (&c, &x) in cols.iter().zip(vals) {
                if c > i {
                    v[c] -= x * vi;
                }
            }
        }
        Ok(v)
    }

    fn check_len(&self, b: &[f64]) -> Result<()> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: b.len(),
            });
        }
        Ok(())
    }

    /// Dense expansion, refused above `cap`.
    pub fn to_dense(&self, cap: usize) -> Result<DenseMatrix> {
        if self.n > cap {
            return Err(Error::DenseCapExceeded { n: self.n, cap });
        }
        let mut d = DenseMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triples() {
            d.set(i, j, v);
        }
        Ok(d)
    }

    /// True when both matrices share the same sparsity pattern.
    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    /// True when every stored position of `self` is stored in `other`.
    pub fn pattern_within(&self, other: &CsrMatrix) -> bool {
        self.n == other.n && self.triples().all(|(i, j, _)| other.position(i, j).is_some())
    }
}
