//! Independent dense oracles and generators shared by the integration tests.
//! The oracles never call into the library's numerical kernels.
#![allow(dead_code)]

use learned_ilu::dataset::{poisson2d, solve_reference, supervised_sample};
use learned_ilu::training::{loss_and_gradient, loss_value, standard_normal, LossKind, TrainSample};
use learned_ilu::{CoatesGraph, CsrMatrix, ModelParams, Mode};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dense_of(a: &CsrMatrix) -> Dense {
    let n = a.n();
    let mut d = vec![vec![0.0; n]; n];
    for (i, j, v) in a.triples() {
        d[i][j] += v;
    }
    d
}

pub fn matvec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            let aik = a[i][k];
            for j in 0..p {
                c[i][j] += aik * b[k][j];
            }
        }
    }
    c
}

pub fn transpose(a: &Dense) -> Dense {
    let (n, m) = (a.len(), a[0].len());
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

pub fn frobenius(a: &Dense) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian elimination with partial pivoting on a copy.
pub fn ge_solve(a: &Dense, b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &bi)| {
        let mut r = r.clone();
        r.push(bi);
        r
    }).collect();
    for k in 0..n {
        let p = (k..n).max_by(|&x, &y| m[x][k].abs().total_cmp(&m[y][k].abs())).unwrap();
        m.swap(k, p);
        assert!(m[k][k] != 0.0, "singular oracle system");
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k..=n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

pub fn ge_inverse(a: &Dense) -> Dense {
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            ge_solve(a, &e)
        })
        .collect();
    transpose(&cols)
}

/// Doolittle LU without pivoting: unit-diagonal L, U with the pivots.
pub fn doolittle(a: &Dense) -> (Dense, Dense) {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    let mut u = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in i..n {
            u[i][k] = a[i][k] - (0..i).map(|j| l[i][j] * u[j][k]).sum::<f64>();
        }
        l[i][i] = 1.0;
        for k in i + 1..n {
            l[k][i] = (a[k][i] - (0..i).map(|j| l[k][j] * u[j][i]).sum::<f64>()) / u[i][i];
        }
    }
    (l, u)
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Dense) -> Vec<f64> {
    let n = a.len();
    let mut m = a.clone();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off.sqrt() < 1e-15 * frobenius(&m).max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Singular values from the eigenvalues of `BᵀB`, descending.
pub fn singular_values_via_eigen(b: &Dense) -> Vec<f64> {
    symmetric_eigenvalues(&matmul(&transpose(b), b))
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Cholesky factor of an SPD matrix; `None` if not positive definite.
pub fn cholesky(a: &Dense) -> Option<Dense> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Central difference of `f` along coordinate `k`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[k] += h;
    xm[k] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Random sparse matrix with a strongly weighted diagonal, density `p`.
pub fn random_sparse<R: Rng>(rng: &mut R, n: usize, p: f64, diag: f64) -> CsrMatrix {
    let mut t = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                t.push((i, j, diag + rng.random::<f64>()));
            } else if rng.random::<f64>() < p {
                t.push((i, j, rng.random_range(-1.0..1.0)));
            }
        }
    }
    CsrMatrix::from_coo(n, &t).unwrap()
}

/// Dense random matrix stored as CSR, shifted by `shift · I`.
pub fn random_dense_csr<R: Rng>(rng: &mut R, n: usize, shift: f64) -> CsrMatrix {
    let mut t = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v = rng.random_range(-1.0..1.0) + if i == j { shift } else { 0.0 };
            t.push((i, j, v));
        }
    }
    CsrMatrix::from_coo(n, &t).unwrap()
}

/// 5-point stencil on a `k × k` grid with random values, diagonally dominant.
pub fn random_five_point<R: Rng>(rng: &mut R, k: usize) -> CsrMatrix {
    let idx = |r: usize, c: usize| r * k + c;
    let mut t = Vec::new();
    for r in 0..k {
        for c in 0..k {
            let i = idx(r, c);
            t.push((i, i, 4.0 + rng.random::<f64>()));
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(idx(r - 1, c));
            }
            if r + 1 < k {
                nb.push(idx(r + 1, c));
            }
            if c > 0 {
                nb.push(idx(r, c - 1));
            }
            if c + 1 < k {
                nb.push(idx(r, c + 1));
            }
            for j in nb {
                t.push((i, j, rng.random_range(-1.0..0.0)));
            }
        }
    }
    CsrMatrix::from_coo(k * k, &t).unwrap()
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Perturbed 5-point problem on a `k × k` grid with a normal right-hand side.
pub fn small_sample(k: usize, seed: u64) -> TrainSample {
    let mut r = rng(seed);
    let base = poisson2d(k);
    let a = learned_ilu::dataset::perturb(&base, &mut r).unwrap();
    supervised_sample(a, &mut r, seed).unwrap()
}

/// Worst relative error between tape gradients and central differences
/// over `coords` random parameter coordinates. The denominator is floored
/// at `1e-8` so exactly-zero gradients compare absolutely.
pub fn gradient_check(params: &ModelParams, sample: &TrainSample, kind: LossKind, coords: usize, h: f64, seed: u64) -> f64 {
    let graph = CoatesGraph::from_matrix(&sample.a);
    let mut r = rng(seed);
    let n = sample.a.n();
    let probes = vec![standard_normal(&mut r, n)];
    let inverses: Option<Vec<Vec<f64>>> =
        (kind == LossKind::Min).then(|| probes.iter().map(|w| solve_reference(&sample.a, w).unwrap()).collect());
    let (_, grad) =
        loss_and_gradient(params, &graph, kind, 0.2, sample, &probes, inverses.as_deref(), Mode::Train).unwrap();
    let flat = params.flat();
    let f = |x: &[f64]| {
        let mut p = params.clone();
        p.set_flat(x);
        loss_value(&p, &graph, kind, 0.2, sample, &probes, inverses.as_deref(), Mode::Train).unwrap()
    };
    sample_indices(&mut r, flat.len(), coords)
        .into_iter()
        .map(|k| {
            let fd = central_difference(&f, &flat, k, h);
            (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}
