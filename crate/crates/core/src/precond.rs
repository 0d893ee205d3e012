//! Right preconditioners: identity, Jacobi, and triangular factor pairs
//! (ILU(0) and the learned factorization share the same applicator).

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// A nonsingular linear map `P` whose inverse can be applied cheaply.
pub trait Preconditioner: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// `P⁻¹ v`.
    fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>>;

    /// `P⁻ᵀ v`.
    fn apply_inverse_transpose(&self, v: &[f64]) -> Result<Vec<f64>>;

    /// `P` itself, materialized as a sparse matrix.
    fn to_csr(&self) -> Result<CsrMatrix>;
}

fn check_dim(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// `P = I`; running GMRES with it is the unpreconditioned method.
#[derive(Debug, Clone)]
pub struct Identity {
    n: usize,
}

impl Identity {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl Preconditioner for Identity {
    fn name(&self) -> &str {
        "none"
    }

    fn dim(&self) -> usize {
        self.n
    }

    fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n, v)?;
        Ok(v.to_vec())
    }

    fn apply_inverse_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply_inverse(v)
    }

    fn to_csr(&self) -> Result<CsrMatrix> {
        Ok(CsrMatrix::identity(self.n))
    }
}

/// `P = diag(A)`, with zero or absent diagonal entries replaced by 1.
#[derive(Debug, Clone)]
pub struct Jacobi {
    diag: Vec<f64>,
}

impl Jacobi {
    pub fn from_matrix(a: &CsrMatrix) -> Self {
        let diag = a
            .diagonal()
            .into_iter()
            .map(|d| if d == 0.0 { 1.0 } else { d })
            .collect();
        Self { diag }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }
}

impl Preconditioner for Jacobi {
    fn name(&self) -> &str {
        "jacobi"
    }

    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.diag.len(), v)?;
        Ok(v.iter().zip(&self.diag).map(|(x, d)| x / d).collect())
    }

    fn apply_inverse_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply_inverse(v)
    }

    fn to_csr(&self) -> Result<CsrMatrix> {
        Ok(CsrMatrix::from_diagonal(&self.diag))
    }
}

/// Lower and upper triangular factors with stored diagonals; `P = L U`.
///
/// ILU(0) stores a unit diagonal in `L` and the pivots in `U`. The learned
/// factorization stores the guarded diagonal in `L` and a unit diagonal in
/// `U`; [`FactorPair::check_learned`] verifies that convention.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub lower: CsrMatrix,
    pub upper: CsrMatrix,
    /// Diagonal guard used when the pair was produced.
    pub epsilon: f64,
    pub label: String,
}

impl FactorPair {
    pub fn new(lower: CsrMatrix, upper: CsrMatrix, epsilon: f64, label: impl Into<String>) -> Result<Self> {
        if lower.n() != upper.n() {
            return Err(Error::DimensionMismatch {
                expected: lower.n(),
                found: upper.n(),
            });
        }
        if lower.triples().any(|(i, j, _)| j > i) {
            return Err(Error::InvalidStructure("lower factor has entries above the diagonal".into()));
        }
        if upper.triples().any(|(i, j, _)| j < i) {
            return Err(Error::InvalidStructure("upper factor has entries below the diagonal".into()));
        }
        Ok(Self {
            lower,
            upper,
            epsilon,
            label: label.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.lower.n()
    }

    /// `v = U⁻¹ (L⁻¹ r)` by forward then backward substitution.
    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        let y = self.lower.lower_tri_solve(r)?;
        self.upper.upper_tri_solve(&y)
    }

    /// `P v = L (U v)`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.lower.spmv(&self.upper.spmv(v)?)
    }

    /// Exact sparse product `L U`, including fill outside the input pattern.
    pub fn product(&self) -> Result<CsrMatrix> {
        self.lower.matmul(&self.upper)
    }

    /// Checks `|L_ii| ≥ ε` and `U_ii = 1` for every row.
    pub fn check_learned(&self, eps: f64) -> Result<()> {
        for i in 0..self.n() {
            let l = self.lower.get(i, i).unwrap_or(0.0);
            if l.abs() < eps || !l.is_finite() {
                return Err(Error::NumericalBreakdown(format!(
                    "|L[{i},{i}]| = {:e} is below the guard {eps:e}",
                    l.abs()
                )));
            }
            if self.upper.get(i, i) != Some(1.0) {
                return Err(Error::NumericalBreakdown(format!("U[{i},{i}] is not 1")));
            }
        }
        Ok(())
    }
}

impl Preconditioner for FactorPair {
    fn name(&self) -> &str {
        &self.label
    }

    fn dim(&self) -> usize {
        self.n()
    }

    fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.solve(v)
    }

    fn apply_inverse_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        let y = self.upper.upper_tri_solve_transpose(v)?;
        self.lower.lower_tri_solve_transpose(&y)
    }

    fn to_csr(&self) -> Result<CsrMatrix> {
        self.product()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IluOptions {
    /// Pivots smaller than this in magnitude are replaced by `±pivot_guard`.
    pub pivot_guard: f64,
    /// Escalate a guarded pivot to an error.
    pub strict: bool,
}

impl Default for IluOptions {
    fn default() -> Self {
        Self {
            pivot_guard: 1e-8,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IluDiagnostics {
    pub guarded_pivots: usize,
}

/// ILU(0) with default options.
pub fn ilu0(a: &CsrMatrix) -> Result<FactorPair> {
    ilu0_with(a, IluOptions::default()).map(|(f, _)| f)
}

/// Zero-fill incomplete LU in IKJ order on the pattern of `A` plus its
/// diagonal. `L` gets a unit diagonal and the multipliers, `U` the pivots.
pub fn ilu0_with(a: &CsrMatrix, opts: IluOptions) -> Result<(FactorPair, IluDiagnostics)> {
    let mut w = a.add_missing_diagonal();
    let n = w.n();
    let row_ptr = w.row_ptr().to_vec();
    let col_idx = w.col_idx().to_vec();
    let diag_pos: Vec<usize> = (0..n).map(|i| w.position(i, i).expect("diagonal present")).collect();
    let vals = w.values_mut();
    let mut pos = vec![usize::MAX; n];
    let mut diag = IluDiagnostics::default();

    for i in 0..n {
        let row = row_ptr[i]..row_ptr[i + 1];
        for p in row.clone() {
            pos[col_idx[p]] = p;
        }
        for p in row_ptr[i]..diag_pos[i] {
            let k = col_idx[p];
            let mult = vals[p] / vals[diag_pos[k]];
            vals[p] = mult;
            for q in diag_pos[k] + 1..row_ptr[k + 1] {
                let target = pos[col_idx[q]];
                if target != usize::MAX {
                    vals[target] -= mult * vals[q];
                }
            }
        }
        let d = vals[diag_pos[i]];
        if d.abs() < opts.pivot_guard || !d.is_finite() {
            if opts.strict {
                return Err(Error::NumericalBreakdown(format!(
                    "ILU(0) pivot {d:e} at row {i} below guard"
                )));
            }
            vals[diag_pos[i]] = if d < 0.0 { -opts.pivot_guard } else { opts.pivot_guard };
            diag.guarded_pivots += 1;
        }
        for p in row {
            pos[col_idx[p]] = usize::MAX;
        }
    }

    let lower = unit_lower(&w);
    let upper = w.upper_part();
    Ok((FactorPair::new(lower, upper, opts.pivot_guard, "ilu0")?, diag))
}

/// Strictly lower entries of `w` plus a stored unit diagonal.
fn unit_lower(w: &CsrMatrix) -> CsrMatrix {
    let lower = w.lower_part();
    let mut vals = lower.values().to_vec();
    for i in 0..lower.n() {
        if let Some(p) = lower.position(i, i) {
            vals[p] = 1.0;
        }
    }
    lower.with_values(vals).expect("same pattern")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_is_pass_through() {
        let p = Identity::new(3);
        assert_eq!(p.apply_inverse(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(p.apply_inverse(&[2.0, -1.0, 0.5]).unwrap(), vec![2.0, -1.0, 0.5]);
        assert!(p.apply_inverse(&[1.0]).is_err());
    }

    #[test]
    fn jacobi_examples() {
        let p = Jacobi::from_matrix(&CsrMatrix::from_diagonal(&[2.0, 4.0]));
        assert_eq!(p.apply_inverse(&[2.0, 4.0]).unwrap(), vec![1.0, 1.0]);

        let fig1 = CsrMatrix::from_coo(
            3,
            &[(0, 0, 2.4), (0, 2, 2.2), (1, 0, 0.5), (1, 1, 3.2), (2, 0, 2.1), (2, 1, 1.7)],
        )
        .unwrap();
        let p = Jacobi::from_matrix(&fig1);
        assert_close(&p.apply_inverse(&[2.4, 3.2, 5.0]).unwrap(), &[1.0, 1.0, 5.0], 1e-15);

        let p = Jacobi::from_matrix(&CsrMatrix::identity(3));
        assert_eq!(p.apply_inverse(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn ilu0_diagonal_matrix() {
        let a = CsrMatrix::from_diagonal(&[2.0, -3.0, 5.0]);
        let f = ilu0(&a).unwrap();
        assert_eq!(f.lower, CsrMatrix::identity(3));
        assert_eq!(f.upper, a);
    }

    #[test]
    fn ilu0_full_two_by_two_is_exact_lu() {
        let a = CsrMatrix::from_coo(2, &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]).unwrap();
        let f = ilu0(&a).unwrap();
        assert_eq!(f.lower.get(1, 0), Some(0.25));
        assert_eq!(f.lower.get(0, 0), Some(1.0));
        assert_eq!(f.upper.get(0, 0), Some(4.0));
        assert_eq!(f.upper.get(0, 1), Some(1.0));
        assert_eq!(f.upper.get(1, 1), Some(2.75));
        let x = f.apply_inverse(&[4.0, 2.0]).unwrap();
        assert_close(&x, &[10.0 / 11.0, 4.0 / 11.0], 1e-15);
    }

    #[test]
    fn ilu0_guards_zero_pivot() {
        let a = CsrMatrix::from_coo(2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let (f, d) = ilu0_with(&a, IluOptions::default()).unwrap();
        assert_eq!(d.guarded_pivots, 1);
        assert_eq!(f.upper.get(1, 1), Some(1e-8));
        let strict = IluOptions { strict: true, ..IluOptions::default() };
        assert!(matches!(ilu0_with(&a, strict), Err(Error::NumericalBreakdown(_))));
    }

    #[test]
    fn factor_pair_rejects_misplaced_entries() {
        let bad = CsrMatrix::from_coo(2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]).unwrap();
        assert!(FactorPair::new(bad.clone(), CsrMatrix::identity(2), 1e-4, "x").is_err());
        assert!(FactorPair::new(CsrMatrix::identity(2), bad.transpose(), 1e-4, "x").is_err());
    }

    #[test]
    fn learned_invariant_check() {
        let f = FactorPair::new(
            CsrMatrix::from_diagonal(&[1e-4, -2.0]),
            CsrMatrix::identity(2),
            1e-4,
            "learned",
        )
        .unwrap();
        assert!(f.check_learned(1e-4).is_ok());
        let g = FactorPair::new(CsrMatrix::from_diagonal(&[1e-5, 1.0]), CsrMatrix::identity(2), 1e-4, "x").unwrap();
        assert!(g.check_learned(1e-4).is_err());
    }
}
