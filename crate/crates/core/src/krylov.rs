//! Right-preconditioned full GMRES.
//!
//! The Krylov basis of `A P⁻¹` is grown one vector per iteration by
//! modified Gram–Schmidt; earlier basis vectors and Hessenberg columns are
//! kept, so each iteration performs only the newest orthogonalization.
//! The least-squares problem `min ‖β e₁ − H y‖₂` is maintained with Givens
//! rotations, which yields the residual norm `ρ_k` after every step without
//! forming the iterate.

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::precond::Preconditioner;
use crate::sparse::CsrMatrix;

/// `h_{k+1,k}` at or below this fraction of `‖A P⁻¹ v_k‖` ends the
/// iteration as a lucky breakdown.
const LUCKY_RELATIVE: f64 = 1e-14;

/// How far the true residual may exceed the tolerance before a solve whose
/// recurrence residual converged is reported as not converged. The gap
/// grows with the conditioning of `P`.
pub const TRUE_RESIDUAL_SLACK: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal Krylov basis `V` and Hessenberg coefficients `H`.
#[derive(Debug, Clone)]
pub struct ArnoldiState {
    basis: Vec<Vec<f64>>,
    /// Column `i` holds `h_{0..=i+1, i}`.
    hessenberg: Vec<Vec<f64>>,
    beta: f64,
    lucky: bool,
    reorthogonalize: bool,
}

impl ArnoldiState {
    /// Starts from the initial residual; `v₁ = r₀ / ‖r₀‖`.
    pub fn new(r0: &[f64]) -> Result<Self> {
        let beta = norm2(r0);
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::NumericalBreakdown(format!(
                "cannot start Arnoldi from a residual of norm {beta:e}"
            )));
        }
        Ok(Self {
            basis: vec![r0.iter().map(|x| x / beta).collect()],
            hessenberg: Vec::new(),
            beta,
            lucky: false,
            reorthogonalize: false,
        })
    }

    /// Enables a second modified Gram–Schmidt sweep per step.
    pub fn with_reorthogonalization(mut self, on: bool) -> Self {
        self.reorthogonalize = on;
        self
    }

    /// Number of completed steps (columns of `H`).
    pub fn k(&self) -> usize {
        self.hessenberg.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_lucky(&self) -> bool {
        self.lucky
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn hessenberg_column(&self, i: usize) -> &[f64] {
        &self.hessenberg[i]
    }

    /// `H_{k+1,k}` as a dense matrix.
    pub fn hessenberg(&self) -> DenseMatrix {
        let k = self.k();
        let mut h = DenseMatrix::zeros(k + 1, k);
        for (j, col) in self.hessenberg.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                h.set(i, j, v);
            }
        }
        h
    }

    /// One Arnoldi step: `w = A P⁻¹ v_k`, orthogonalized against `v_1..v_k`
    /// by sequential subtraction.
    pub fn step(&mut self, a: &CsrMatrix, p: &dyn Preconditioner) -> Result<()> {
        if self.lucky {
            return Err(Error::NumericalBreakdown(
                "Arnoldi step requested after lucky breakdown".into(),
            ));
        }
        let k = self.k();
        let z = p.apply_inverse(&self.basis[k])?;
        let mut w = a.spmv(&z)?;
        let w_norm = norm2(&w);
        let mut h = vec![0.0; k + 2];
        for (j, v) in self.basis.iter().enumerate() {
            let hj = dot(&w, v);
            h[j] = hj;
            w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= hj * vi);
        }
        if self.reorthogonalize {
            for (j, v) in self.basis.iter().enumerate() {
                let c = dot(&w, v);
                h[j] += c;
                w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
            }
        }
        let h_next = norm2(&w);
        if !h_next.is_finite() {
            return Err(Error::NumericalBreakdown(format!(
                "non-finite Arnoldi vector at step {}",
                k + 1
            )));
        }
        h[k + 1] = h_next;
        if h_next == 0.0 || h_next <= LUCKY_RELATIVE * w_norm {
            self.lucky = true;
        } else {
            self.basis.push(w.into_iter().map(|x| x / h_next).collect());
        }
        self.hessenberg.push(h);
        Ok(())
    }

    /// `max |v_iᵀ v_j − δ_ij|` over the stored basis.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, vi) in self.basis.iter().enumerate() {
            for (j, vj) in self.basis[..=i].iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(vi, vj) - target).abs());
            }
        }
        worst
    }

    /// For each prefix `j = 1..=k`, `‖A P⁻¹ V_j − V_{j+1} H_{j+1,j}‖_F / ‖H_{j+1,j}‖_F`.
    ///
    /// After a lucky breakdown the last column is checked against `V_k H_k`.
    pub fn relation_errors(&self, a: &CsrMatrix, p: &dyn Preconditioner) -> Result<Vec<f64>> {
        let mut res_sq = 0.0;
        let mut h_sq = 0.0;
        let mut out = Vec::with_capacity(self.k());
        for (j, col) in self.hessenberg.iter().enumerate() {
            let mut r = a.spmv(&p.apply_inverse(&self.basis[j])?)?;
            for (i, &hij) in col.iter().enumerate() {
                h_sq += hij * hij;
                if let Some(v) = self.basis.get(i) {
                    r.iter_mut().zip(v).for_each(|(ri, vi)| *ri -= hij * vi);
                }
            }
            res_sq += dot(&r, &r);
            out.push((res_sq / h_sq).sqrt());
        }
        Ok(out)
    }
}

/// Advances `state` by one Arnoldi step.
pub fn arnoldi_step(a: &CsrMatrix, p: &dyn Preconditioner, mut state: ArnoldiState) -> Result<ArnoldiState> {
    state.step(a, p)?;
    Ok(state)
}

/// Incremental QR of a growing Hessenberg matrix by Givens rotations.
#[derive(Debug, Clone)]
pub struct GivensLstsq {
    /// Rotated column `i`, entries `r_{0..=i, i}`.
    r: Vec<Vec<f64>>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    /// Rotated `β e₁`; `|g[k]|` is the current residual norm.
    g: Vec<f64>,
}

impl GivensLstsq {
    pub fn new(beta: f64) -> Self {
        Self {
            r: Vec::new(),
            cos: Vec::new(),
            sin: Vec::new(),
            g: vec![beta],
        }
    }

    /// Appends Hessenberg column `k` (length `k + 2`) and returns `ρ_{k+1}`.
    pub fn push_column(&mut self, column: &[f64]) -> Result<f64> {
        let k = self.r.len();
        if column.len() != k + 2 {
            return Err(Error::DimensionMismatch {
                expected: k + 2,
                found: column.len(),
            });
        }
        let mut col = column.to_vec();
        for i in 0..k {
            let (c, s) = (self.cos[i], self.sin[i]);
            let (a, b) = (col[i], col[i + 1]);
            col[i] = c * a + s * b;
            col[i + 1] = -s * a + c * b;
        }
        let (a, b) = (col[k], col[k + 1]);
        let r = a.hypot(b);
        if r == 0.0 {
            return Err(Error::NumericalBreakdown(format!(
                "exactly singular Hessenberg column {}",
                k + 1
            )));
        }
        let (c, s) = (a / r, b / r);
        col[k] = r;
        col.truncate(k + 1);
        self.cos.push(c);
        self.sin.push(s);
        let gk = self.g[k];
        self.g[k] = c * gk;
        self.g.push(-s * gk);
        self.r.push(col);
        Ok(self.residual())
    }

    pub fn residual(&self) -> f64 {
        self.g.last().copied().unwrap_or(0.0).abs()
    }

    /// Back substitution on the triangular factor.
    pub fn solve(&self) -> Vec<f64> {
        let k = self.r.len();
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = self.g[i];
            for (j, yj) in y.iter().enumerate().skip(i + 1) {
                acc -= self.r[j][i] * yj;
            }
            y[i] = acc / self.r[i][i];
        }
        y
    }
}

/// `y = argmin ‖β e₁ − H y‖₂` for a `(k+1)×k` upper Hessenberg `H`,
/// together with the attained residual.
pub fn hessenberg_lstsq(h: &DenseMatrix, beta: f64) -> Result<(Vec<f64>, f64)> {
    let k = h.n_cols();
    if h.n_rows() != k + 1 {
        return Err(Error::DimensionMismatch {
            expected: k + 1,
            found: h.n_rows(),
        });
    }
    let mut ls = GivensLstsq::new(beta);
    for j in 0..k {
        if (j + 2..=k).any(|i| h.get(i, j) != 0.0) {
            return Err(Error::InvalidStructure(format!(
                "column {j} has entries below the subdiagonal"
            )));
        }
        let col: Vec<f64> = (0..j + 2).map(|i| h.get(i, j)).collect();
        ls.push_column(&col)?;
    }
    Ok((ls.solve(), ls.residual()))
}

#[derive(Debug, Clone)]
pub struct GmresOptions {
    /// Relative residual tolerance: stop once `ρ_k ≤ tol · ρ₀`.
    pub tol: f64,
    /// Iteration cap; `None` means `n`.
    pub max_iter: Option<usize>,
    pub reorthogonalize: bool,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
            reorthogonalize: false,
        }
    }
}

impl GmresOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `ρ_0, ρ_1, …, ρ_k`.
    pub residual_history: Vec<f64>,
    /// The recurrence residual met the tolerance and the true residual
    /// `‖b − A x‖` is within [`TRUE_RESIDUAL_SLACK`] of it.
    pub converged: bool,
    /// `‖b − A x‖₂` of the returned iterate.
    pub true_residual: f64,
    /// The Krylov space became invariant (lucky breakdown).
    pub breakdown: bool,
}

impl SolveResult {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().unwrap()
    }
}

/// Solves `A x = b` by GMRES on `A P⁻¹ y = b`, `x = x₀ + P⁻¹ V_k y_k`.
pub fn gmres(
    a: &CsrMatrix,
    p: &dyn Preconditioner,
    b: &[f64],
    x0: &[f64],
    opts: &GmresOptions,
) -> Result<SolveResult> {
    gmres_traced(a, p, b, x0, opts).map(|(r, _)| r)
}

/// [`gmres`] that also returns the final Arnoldi state (absent when
/// `ρ₀ = 0`).
pub fn gmres_traced(
    a: &CsrMatrix,
    p: &dyn Preconditioner,
    b: &[f64],
    x0: &[f64],
    opts: &GmresOptions,
) -> Result<(SolveResult, Option<ArnoldiState>)> {
    let n = a.n();
    for v in [b, x0] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: v.len(),
            });
        }
    }
    if p.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: p.dim(),
        });
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config(format!("GMRES tolerance must be positive, got {}", opts.tol)));
    }
    let kmax = opts.max_iter.unwrap_or(n);
    if kmax > n {
        return Err(Error::Config(format!("GMRES iteration cap {kmax} exceeds n = {n}")));
    }

    let ax0 = a.spmv(x0)?;
    let r0: Vec<f64> = b.iter().zip(&ax0).map(|(bi, ai)| bi - ai).collect();
    let rho0 = norm2(&r0);
    if !rho0.is_finite() {
        return Err(Error::NumericalBreakdown("non-finite initial residual".into()));
    }
    if rho0 == 0.0 {
        return Ok((
            SolveResult {
                x: x0.to_vec(),
                iterations: 0,
                residual_history: vec![0.0],
                converged: true,
                true_residual: 0.0,
                breakdown: false,
            },
            None,
        ));
    }

    let mut state = ArnoldiState::new(&r0)?.with_reorthogonalization(opts.reorthogonalize);
    let mut ls = GivensLstsq::new(rho0);
    let mut history = vec![rho0];
    let mut rho = rho0;
    let mut breakdown = false;
    while rho > opts.tol * rho0 && state.k() < kmax {
        state.step(a, p)?;
        rho = ls.push_column(state.hessenberg_column(state.k() - 1))?;
        history.push(rho);
        if state.is_lucky() {
            breakdown = true;
            break;
        }
    }

    let y = ls.solve();
    let mut u = vec![0.0; n];
    for (yj, v) in y.iter().zip(state.basis()) {
        u.iter_mut().zip(v).for_each(|(ui, vi)| *ui += yj * vi);
    }
    let correction = p.apply_inverse(&u)?;
    let x: Vec<f64> = x0.iter().zip(&correction).map(|(a, b)| a + b).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite GMRES iterate".into()));
    }
    let ax = a.spmv(&x)?;
    let true_residual = norm2(&b.iter().zip(&ax).map(|(u, v)| u - v).collect::<Vec<_>>());
    let result = SolveResult {
        x,
        iterations: state.k(),
        residual_history: history,
        converged: rho <= opts.tol * rho0 && true_residual <= TRUE_RESIDUAL_SLACK * opts.tol * rho0,
        true_residual,
        breakdown,
    };
    Ok((result, Some(state)))
}
