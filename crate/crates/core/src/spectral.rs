//! Singular values of the right-preconditioned operator `A P⁻¹`, the
//! Frobenius-norm bounds on its extreme singular values, and the
//! per-preconditioner evaluation table.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::solve_reference;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::krylov::{gmres, GmresOptions};
use crate::neural::{learned_preconditioner, ModelParams};
use crate::precond::{ilu0, FactorPair, Identity, Jacobi, Preconditioner};
use crate::sparse::{CsrMatrix, DEFAULT_DENSE_CAP};
use crate::training::{standard_normal, TrainSample};

pub const SVD_MAX_SWEEPS: usize = 30;
pub const HISTOGRAM_BINS: usize = 60;
/// Slack of the bound checks, relative to `max(1, |bound|)`.
pub const BOUND_SLACK: f64 = 1e-9;

/// `A P⁻¹` materialized column by column.
pub fn precond_dense(a: &CsrMatrix, p: &dyn Preconditioner, cap: usize) -> Result<DenseMatrix> {
    let n = a.n();
    if n > cap {
        return Err(Error::DenseCapExceeded { n, cap });
    }
    let mut m = DenseMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = a.spmv(&p.apply_inverse(&e)?)?;
        m.set_column(j, &col);
        e[j] = 0.0;
    }
    Ok(m)
}

/// Singular values in descending order by one-sided Jacobi rotations.
pub fn svd_values(b: &DenseMatrix) -> Result<Vec<f64>> {
    let n = b.n_cols();
    let m = b.n_rows();
    // columns of b as contiguous rows
    let mut cols = b.transpose();
    let tol = f64::EPSILON * m.max(1) as f64;
    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (cols.row(p), cols.row(q));
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = cols.get(p, i);
                    let y = cols.get(q, i);
                    cols.set(p, i, c * x - s * y);
                    cols.set(q, i, s * x + c * y);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalBreakdown(format!(
            "Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps"
        )));
    }
    let mut s: Vec<f64> = (0..n)
        .map(|j| cols.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn normalize(v: &mut [f64]) -> f64 {
    let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nrm > 0.0 {
        v.iter_mut().for_each(|x| *x /= nrm);
    }
    nrm
}

/// Power iteration on the symmetric map `op` from a fixed normal start;
/// returns the dominant eigenvalue estimate.
fn power_iteration(
    n: usize,
    iters: usize,
    tol: f64,
    op: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<PowerEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut v = standard_normal(&mut rng, n);
    normalize(&mut v);
    let mut lambda = 0.0;
    for k in 1..=iters.max(1) {
        let mut y = op(&v)?;
        let next: f64 = y.iter().zip(&v).map(|(a, b)| a * b).sum();
        normalize(&mut y);
        v = y;
        if k > 1 && (next - lambda).abs() <= tol * next.abs() {
            return Ok(PowerEstimate {
                value: next,
                iterations: k,
                converged: true,
            });
        }
        lambda = next;
    }
    Ok(PowerEstimate {
        value: lambda,
        iterations: iters.max(1),
        converged: false,
    })
}

/// σ_max(A P⁻¹) by power iteration on `Mᵀ M`, matrix-free.
pub fn sigma_max_power(a: &CsrMatrix, p: &dyn Preconditioner, iters: usize, tol: f64) -> Result<PowerEstimate> {
    let est = power_iteration(a.n(), iters, tol, |v| {
        let u = a.spmv(&p.apply_inverse(v)?)?;
        p.apply_inverse_transpose(&a.spmv_transpose(&u)?)
    })?;
    Ok(PowerEstimate {
        value: est.value.max(0.0).sqrt(),
        ..est
    })
}

/// σ_min(A P⁻¹) by power iteration on `M⁻¹ M⁻ᵀ = P A⁻¹ A⁻ᵀ Pᵀ`, with the
/// solves done by the reference solver. For matrices beyond the dense cap.
pub fn sigma_min_inverse_power(
    a: &CsrMatrix,
    p: &dyn Preconditioner,
    iters: usize,
    tol: f64,
) -> Result<PowerEstimate> {
    let pm = p.to_csr()?;
    let at = a.transpose();
    let est = power_iteration(a.n(), iters, tol, |v| {
        let t = solve_reference(&at, &pm.spmv_transpose(v)?)?;
        pm.spmv(&solve_reference(a, &t)?)
    })?;
    Ok(PowerEstimate {
        value: if est.value > 0.0 { 1.0 / est.value.sqrt() } else { f64::INFINITY },
        ..est
    })
}

fn within(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + BOUND_SLACK * rhs.abs().max(1.0)
}

/// Upper bound `σ_max(A P⁻¹) ≤ ‖A − P‖_F / ε + 1` for factors whose lower
/// diagonal is guarded by `ε`, next to the form with the measured
/// `‖P⁻¹‖₂` that holds for any nonsingular `P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBoundCheck {
    pub sigma_max: f64,
    pub bound: f64,
    pub holds: bool,
    /// `‖A − P‖_F ‖P⁻¹‖₂ + 1`.
    pub measured_bound: f64,
    pub measured_holds: bool,
}

pub fn upper_bound_check(a: &CsrMatrix, f: &FactorPair, eps: f64, cap: usize) -> Result<UpperBoundCheck> {
    let m = precond_dense(a, f, cap)?;
    let sigma_max = svd_values(&m)?[0];
    let p = f.product()?;
    let diff = a.axpby(1.0, &p, -1.0)?.frobenius_norm();
    let p_sv = svd_values(&p.to_dense(cap)?)?;
    let p_inv_norm = 1.0 / *p_sv.last().unwrap_or(&f64::NAN);
    let bound = diff / eps + 1.0;
    let measured_bound = diff * p_inv_norm + 1.0;
    Ok(UpperBoundCheck {
        sigma_max,
        bound,
        holds: within(sigma_max, bound),
        measured_bound,
        measured_holds: within(sigma_max, measured_bound),
    })
}

/// Lower bounds `σ_min(A P⁻¹) ≥ 1/‖P A⁻¹‖_F` and
/// `σ_min(A P⁻¹) ≥ 1/(‖P A⁻¹ − I‖_F + 1)`, each checked on its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBoundCheck {
    pub sigma_min: f64,
    pub inverse_frobenius: f64,
    pub deviation_bound: f64,
    pub holds_inverse: bool,
    pub holds_deviation: bool,
}

impl LowerBoundCheck {
    pub fn holds(&self) -> bool {
        self.holds_inverse && self.holds_deviation
    }
}

/// Dense `P A⁻¹`.
pub fn p_a_inverse(a: &CsrMatrix, p: &dyn Preconditioner, cap: usize) -> Result<DenseMatrix> {
    let ainv = a.to_dense(cap)?.lu()?.inverse()?;
    let pm = p.to_csr()?;
    let n = a.n();
    let mut out = DenseMatrix::zeros(n, n);
    for j in 0..n {
        out.set_column(j, &pm.spmv(&ainv.column(j))?);
    }
    Ok(out)
}

pub fn lower_bound_check(a: &CsrMatrix, p: &dyn Preconditioner, cap: usize) -> Result<LowerBoundCheck> {
    let m = precond_dense(a, p, cap)?;
    let sigma_min = *svd_values(&m)?.last().unwrap_or(&f64::NAN);
    let pa = p_a_inverse(a, p, cap)?;
    let inverse_frobenius = 1.0 / pa.frobenius_norm();
    let deviation_bound = 1.0 / (pa.minus_identity().frobenius_norm() + 1.0);
    Ok(LowerBoundCheck {
        sigma_min,
        inverse_frobenius,
        deviation_bound,
        holds_inverse: within(inverse_frobenius, sigma_min),
        holds_deviation: within(deviation_bound, sigma_min),
    })
}

/// A preconditioner recipe, instantiated per problem.
#[derive(Debug, Clone)]
pub enum PrecondSpec {
    None,
    Jacobi,
    Ilu0,
    Learned(Box<ModelParams>),
}

impl PrecondSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PrecondSpec::None => "none",
            PrecondSpec::Jacobi => "jacobi",
            PrecondSpec::Ilu0 => "ilu0",
            PrecondSpec::Learned(_) => "learned",
        }
    }

    pub fn build(&self, a: &CsrMatrix) -> Result<Box<dyn Preconditioner>> {
        Ok(match self {
            PrecondSpec::None => Box::new(Identity::new(a.n())),
            PrecondSpec::Jacobi => Box::new(Jacobi::from_matrix(a)),
            PrecondSpec::Ilu0 => Box::new(ilu0(a)?),
            PrecondSpec::Learned(m) => Box::new(learned_preconditioner(m, a)?),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub tol: f64,
    pub dense_cap: usize,
    /// Dense SVD and Frobenius columns.
    pub spectral: bool,
    /// Record wall-clock times; off for byte-reproducible reports.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            dense_cap: DEFAULT_DENSE_CAP,
            spectral: true,
            timing: true,
        }
    }
}

/// One (problem, preconditioner) cell. `None` fields failed or were not
/// computed; `failure` says why.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellResult {
    pub problem: usize,
    pub method: String,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub kappa: Option<f64>,
    pub frob_p_minus_a: Option<f64>,
    pub frob_pa_inv_minus_i: Option<f64>,
    pub iterations: Option<usize>,
    pub setup_time: Option<f64>,
    pub solve_time: Option<f64>,
    pub singular_values: Vec<f64>,
    pub failure: Option<String>,
}

impl CellResult {
    fn fail(&mut self, what: &str, e: impl std::fmt::Display) {
        let msg = format!("{what}: {e}");
        self.failure = Some(match self.failure.take() {
            Some(prev) => format!("{prev}; {msg}"),
            None => msg,
        });
    }
}

fn evaluate_cell(problem: usize, sample: &TrainSample, spec: &PrecondSpec, cfg: &EvalConfig) -> CellResult {
    let mut cell = CellResult {
        problem,
        method: spec.name().to_string(),
        ..CellResult::default()
    };
    let a = &sample.a;
    let t0 = Instant::now();
    let p = match spec.build(a) {
        Ok(p) => p,
        Err(e) => {
            cell.fail("setup", e);
            return cell;
        }
    };
    let setup = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    match gmres(a, p.as_ref(), &sample.b, &vec![0.0; a.n()], &GmresOptions::with_tol(cfg.tol)) {
        Ok(r) if r.converged => cell.iterations = Some(r.iterations),
        Ok(r) => cell.fail(
            "solve",
            format!(
                "not converged after {} iterations (true residual {:e})",
                r.iterations, r.true_residual
            ),
        ),
        Err(e) => cell.fail("solve", e),
    }
    let solve = t1.elapsed().as_secs_f64();
    if cfg.timing {
        cell.setup_time = Some(setup);
        cell.solve_time = Some(solve);
    }
    if !cfg.spectral {
        return cell;
    }
    match p.to_csr().and_then(|pm| a.axpby(1.0, &pm, -1.0)) {
        Ok(d) => cell.frob_p_minus_a = Some(d.frobenius_norm()),
        Err(e) => cell.fail("frobenius", e),
    }
    match p_a_inverse(a, p.as_ref(), cfg.dense_cap) {
        Ok(pa) => cell.frob_pa_inv_minus_i = Some(pa.minus_identity().frobenius_norm()),
        Err(e) => cell.fail("inverse deviation", e),
    }
    match precond_dense(a, p.as_ref(), cfg.dense_cap).and_then(|m| svd_values(&m)) {
        Ok(s) => {
            let (hi, lo) = (s[0], s[s.len() - 1]);
            if hi.is_finite() && lo.is_finite() && lo > 0.0 {
                cell.sigma_max = Some(hi);
                cell.sigma_min = Some(lo);
                cell.kappa = Some(hi / lo);
            } else {
                cell.fail("svd", format!("degenerate spectrum [{lo:e}, {hi:e}]"));
            }
            cell.singular_values = s;
        }
        Err(e) => cell.fail("svd", e),
    }
    cell
}

/// Means over problems for one preconditioner; a column is `None` if any
/// problem failed it.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub kappa: Option<f64>,
    pub frob_p_minus_a: Option<f64>,
    pub frob_pa_inv_minus_i: Option<f64>,
    pub time: Option<f64>,
    pub iterations: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<String>,
    /// Row-major: problem-major, method-minor.
    pub cells: Vec<CellResult>,
    pub summaries: Vec<MethodSummary>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every preconditioner on every problem. Cells are computed in
/// parallel and assembled in fixed order.
pub fn evaluate(problems: &[TrainSample], specs: &[PrecondSpec], cfg: &EvalConfig) -> EvalReport {
    let pairs: Vec<(usize, usize)> = (0..problems.len())
        .flat_map(|i| (0..specs.len()).map(move |j| (i, j)))
        .collect();
    let cells: Vec<CellResult> = pairs
        .par_iter()
        .map(|&(i, j)| evaluate_cell(i, &problems[i], &specs[j], cfg))
        .collect();
    let summaries = specs
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let mine: Vec<&CellResult> = cells.iter().skip(j).step_by(specs.len()).collect();
            MethodSummary {
                method: spec.name().to_string(),
                sigma_min: mean_of(mine.iter().map(|c| c.sigma_min)),
                sigma_max: mean_of(mine.iter().map(|c| c.sigma_max)),
                kappa: mean_of(mine.iter().map(|c| c.kappa)),
                frob_p_minus_a: mean_of(mine.iter().map(|c| c.frob_p_minus_a)),
                frob_pa_inv_minus_i: mean_of(mine.iter().map(|c| c.frob_pa_inv_minus_i)),
                time: mean_of(mine.iter().map(|c| Some(c.setup_time? + c.solve_time?))),
                iterations: mean_of(mine.iter().map(|c| c.iterations.map(|k| k as f64))),
            }
        })
        .collect();
    EvalReport {
        methods: specs.iter().map(|s| s.name().to_string()).collect(),
        cells,
        summaries,
    }
}

fn field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub const REPORT_HEADER: &str =
    "method,sigma_min,sigma_max,kappa,frob_p_minus_a,frob_pa_inv_minus_i,time,iterations";

impl EvalReport {
    /// One aggregate row per preconditioner; failed columns are empty.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.method,
                field(s.sigma_min),
                field(s.sigma_max),
                field(s.kappa),
                field(s.frob_p_minus_a),
                field(s.frob_pa_inv_minus_i),
                field(s.time),
                s.iterations.map(|x| x.to_string()).unwrap_or_default(),
            );
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from(
            "problem,method,sigma_min,sigma_max,kappa,frob_p_minus_a,frob_pa_inv_minus_i,setup_time,solve_time,iterations,failure\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.problem,
                c.method,
                field(c.sigma_min),
                field(c.sigma_max),
                field(c.kappa),
                field(c.frob_p_minus_a),
                field(c.frob_pa_inv_minus_i),
                field(c.setup_time),
                field(c.solve_time),
                c.iterations.map(|k| k.to_string()).unwrap_or_default(),
                c.failure.as_deref().unwrap_or("").replace(',', ";"),
            );
        }
        out
    }

    /// Singular values pooled over problems, per method.
    pub fn pooled_singular_values(&self, method: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == method)
            .flat_map(|c| c.singular_values.iter().copied())
            .collect()
    }

    /// Per-method histograms on one shared log-spaced range.
    pub fn histograms(&self) -> Vec<(String, Histogram)> {
        let pools: Vec<Vec<f64>> = self.methods.iter().map(|m| self.pooled_singular_values(m)).collect();
        let all: Vec<f64> = pools.iter().flatten().copied().filter(|v| *v > 0.0 && v.is_finite()).collect();
        if all.is_empty() {
            return Vec::new();
        }
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(0.0, f64::max);
        self.methods
            .iter()
            .zip(&pools)
            .map(|(m, p)| (m.clone(), Histogram::log_spaced(p, lo / 2.0, hi * 2.0, HISTOGRAM_BINS)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Logarithmically spaced bins over `[lo, hi]`; values outside are dropped.
    pub fn log_spaced(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        assert!(lo > 0.0 && hi > lo && bins > 0);
        let (l0, l1) = (lo.ln(), hi.ln());
        let edges: Vec<f64> = (0..=bins)
            .map(|k| (l0 + (l1 - l0) * k as f64 / bins as f64).exp())
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            if !(v >= lo && v <= hi) {
                continue;
            }
            let k = (((v.ln() - l0) / (l1 - l0)) * bins as f64) as usize;
            counts[k.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{:e},{:e},{}", self.edges[k], self.edges[k + 1], c);
        }
        out
    }

    /// Static bar chart on a log axis.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (640.0, 320.0, 40.0);
        let max = *self.counts.iter().max().unwrap_or(&1).max(&1) as f64;
        let bw = (w - 2.0 * pad) / self.counts.len() as f64;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        let _ = writeln!(
            out,
            "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
            title.replace('<', "&lt;")
        );
        for (k, &c) in self.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * c as f64 / max;
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"/>",
                pad + k as f64 * bw,
                h - pad - bh,
                (bw - 1.0).max(0.5),
                bh
            );
        }
        let _ = writeln!(
            out,
            "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
            h - pad,
            w - pad
        );
        let _ = writeln!(
            out,
            "<text x=\"{pad}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">{:.3e}</text>",
            h - pad + 16.0,
            self.edges[0]
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3e}</text>",
            w - pad,
            h - pad + 16.0,
            self.edges[self.edges.len() - 1]
        );
        out.push_str("</svg>\n");
        out
    }
}
