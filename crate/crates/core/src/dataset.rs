//! Synthetic problems: perturbed 2-D Poisson matrices with right-hand
//! sides and offline reference solutions.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{gmres, GmresOptions};
use crate::mtx;
use crate::precond::ilu0;
use crate::sparse::{CsrMatrix, DEFAULT_DENSE_CAP};
use crate::training::TrainSample;

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_RESAMPLES: usize = 100;
/// Relative residual every stored reference solution must meet.
pub const REFERENCE_RESIDUAL: f64 = 1e-10;
/// GMRES tolerance of the offline solve, tighter than the verified bound.
pub const OFFLINE_TOL: f64 = 1e-12;
const REFINEMENT_ROUNDS: usize = 3;
pub const SPLIT_SEED_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Offset added to the base seed so splits never share seeds.
    pub fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => SPLIT_SEED_STRIDE,
            Split::Test => 2 * SPLIT_SEED_STRIDE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train|val|test)")))
    }
}

/// 5-point Laplacian on a `k × k` grid, unscaled: 4 on the diagonal and
/// −1 per grid neighbour, nodes in row-major order.
pub fn poisson2d(k: usize) -> CsrMatrix {
    let n = k * k;
    let mut triples = Vec::with_capacity(5 * n);
    for r in 0..k {
        for c in 0..k {
            let i = r * k + c;
            if r > 0 {
                triples.push((i, i - k, -1.0));
            }
            if c > 0 {
                triples.push((i, i - 1, -1.0));
            }
            triples.push((i, i, 4.0));
            if c + 1 < k {
                triples.push((i, i + 1, -1.0));
            }
            if r + 1 < k {
                triples.push((i, i + k, -1.0));
            }
        }
    }
    CsrMatrix::from_coo(n, &triples).expect("stencil indices are in range")
}

/// `sin(πx) sin(πy)` at the interior grid points `1/(k+1), …, k/(k+1)`.
pub fn rhs_source(k: usize) -> Vec<f64> {
    let h = 1.0 / (k + 1) as f64;
    let mut b = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            let x = (c + 1) as f64 * h;
            let y = (r + 1) as f64 * h;
            b.push((std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin());
        }
    }
    b
}

/// Adds one draw of `noise` to every stored entry.
pub fn perturb_with(a: &CsrMatrix, mut noise: impl FnMut() -> f64) -> CsrMatrix {
    let values = a.values().iter().map(|v| v + noise()).collect();
    a.with_values(values).expect("same pattern")
}

/// Whether `a` is numerically nonsingular: dense LU when small enough,
/// otherwise a pilot ILU(0)-GMRES solve.
pub fn is_nonsingular(a: &CsrMatrix) -> bool {
    if a.n() <= DEFAULT_DENSE_CAP {
        return a.to_dense(DEFAULT_DENSE_CAP).and_then(|d| d.lu()).is_ok();
    }
    let ones = vec![1.0; a.n()];
    match ilu0(a) {
        Ok(p) => gmres(a, &p, &ones, &vec![0.0; a.n()], &GmresOptions::default())
            .map(|r| r.converged)
            .unwrap_or(false),
        Err(_) => false,
    }
}

/// Gaussian perturbation of every stored entry, redrawn until the result is
/// nonsingular.
pub fn perturb<R: Rng>(a: &CsrMatrix, rng: &mut R) -> Result<CsrMatrix> {
    for _ in 0..MAX_RESAMPLES {
        let p = perturb_with(a, || rng.sample(StandardNormal));
        if is_nonsingular(&p) {
            return Ok(p);
        }
    }
    Err(Error::Generation(format!(
        "no nonsingular perturbation found in {MAX_RESAMPLES} attempts"
    )))
}

fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Result<f64> {
    let ax = a.spmv(x)?;
    let r: f64 = ax.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(if nb == 0.0 { r } else { r / nb })
}

/// Reference solution of `A x = b` by ILU(0)-preconditioned GMRES with a
/// few rounds of iterative refinement, checked against [`REFERENCE_RESIDUAL`].
pub fn solve_reference(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let p = ilu0(a)?;
    let n = a.n();
    let opts = GmresOptions {
        tol: OFFLINE_TOL,
        max_iter: None,
        reorthogonalize: true,
    };
    let mut x = vec![0.0; n];
    let mut last = f64::NAN;
    for _ in 0..=REFINEMENT_ROUNDS {
        let ax = a.spmv(&x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(u, v)| u - v).collect();
        let d = gmres(a, &p, &r, &vec![0.0; n], &opts)?;
        x.iter_mut().zip(&d.x).for_each(|(xi, di)| *xi += di);
        last = relative_residual(a, &x, b)?;
        if last < REFERENCE_RESIDUAL {
            return Ok(x);
        }
    }
    Err(Error::Generation(format!(
        "reference solve reached relative residual {last:e}, need < {REFERENCE_RESIDUAL:e}"
    )))
}

/// Normal right-hand side from `rng` with its reference solution.
pub fn supervised_sample<R: Rng>(a: CsrMatrix, rng: &mut R, seed: u64) -> Result<TrainSample> {
    let b: Vec<f64> = (0..a.n()).map(|_| rng.sample(StandardNormal)).collect();
    let x = solve_reference(&a, &b)
        .map_err(|e| Error::Generation(format!("sample with seed {seed}: {e}")))?;
    Ok(TrainSample {
        a,
        x: Some(x),
        b,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 50,
            val: 5,
            test: 5,
        }
    }
}

pub const DEFAULT_GRID: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSet {
    pub split: Split,
    pub grid_k: usize,
    pub seed_base: u64,
    pub samples: Vec<TrainSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: ProblemSet,
    pub val: ProblemSet,
    pub test: ProblemSet,
}

/// Seed of sample `index` in `split`.
pub fn sample_seed(seed_base: u64, split: Split, index: usize) -> u64 {
    seed_base + split.seed_offset() + index as u64
}

fn make_sample(base: &CsrMatrix, k: usize, split: Split, seed: u64) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = perturb(base, &mut rng)
        .map_err(|e| Error::Generation(format!("{} sample with seed {seed}: {e}", split.as_str())))?;
    match split {
        Split::Test => Ok(TrainSample {
            a,
            x: None,
            b: rhs_source(k),
            seed,
        }),
        _ => supervised_sample(a, &mut rng, seed),
    }
}

pub fn make_split(grid_k: usize, count: usize, split: Split, seed_base: u64) -> Result<ProblemSet> {
    if grid_k < 2 {
        return Err(Error::Config(format!("grid side must be at least 2, got {grid_k}")));
    }
    if count > SPLIT_SEED_STRIDE as usize {
        return Err(Error::Config(format!("split size {count} overlaps the next seed range")));
    }
    let base = poisson2d(grid_k);
    let samples = (0..count)
        .into_par_iter()
        .map(|i| make_sample(&base, grid_k, split, sample_seed(seed_base, split, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProblemSet {
        split,
        grid_k,
        seed_base,
        samples,
    })
}

pub fn make_dataset(grid_k: usize, counts: SplitCounts, seed_base: u64) -> Result<Dataset> {
    for s in Split::ALL {
        if counts.get(s) == 0 {
            return Err(Error::Config(format!("{} split needs at least one sample", s.as_str())));
        }
    }
    Ok(Dataset {
        train: make_split(grid_k, counts.train, Split::Train, seed_base)?,
        val: make_split(grid_k, counts.val, Split::Val, seed_base)?,
        test: make_split(grid_k, counts.test, Split::Test, seed_base)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: String,
    pub grid: usize,
    pub n: usize,
    pub seed_base: u64,
    pub counts: SplitCounts,
    pub splits: Vec<SplitManifest>,
}

fn sample_stem(split: Split, index: usize) -> String {
    format!("{}/{index:04}", split.as_str())
}

impl Dataset {
    pub fn split(&self, split: Split) -> &ProblemSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let k = self.train.grid_k;
        DatasetManifest {
            format_version: FORMAT_VERSION,
            generator: "poisson2d-perturbed".into(),
            grid: k,
            n: k * k,
            seed_base: self.train.seed_base,
            counts: SplitCounts {
                train: self.train.samples.len(),
                val: self.val.samples.len(),
                test: self.test.samples.len(),
            },
            splits: Split::ALL
                .iter()
                .map(|&s| SplitManifest {
                    split: s,
                    seeds: self.split(s).samples.iter().map(|t| t.seed).collect(),
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` and per-split `.mtx`/`.vec` files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for s in Split::ALL {
            fs::create_dir_all(dir.join(s.as_str()))?;
            for (i, t) in self.split(s).samples.iter().enumerate() {
                let stem = dir.join(sample_stem(s, i));
                mtx::save_matrix(stem.with_extension("mtx"), &t.a)?;
                mtx::save_vector(with_suffix(&stem, "_b.vec"), &t.b)?;
                if let Some(x) = &t.x {
                    mtx::save_vector(with_suffix(&stem, "_x.vec"), x)?;
                }
            }
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest())? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "dataset format version {} is not supported",
                manifest.format_version
            )));
        }
        let mut sets = Vec::new();
        for s in Split::ALL {
            let seeds = manifest
                .splits
                .iter()
                .find(|m| m.split == s)
                .map(|m| m.seeds.clone())
                .ok_or_else(|| Error::Config(format!("manifest lacks the {} split", s.as_str())))?;
            let mut samples = Vec::with_capacity(seeds.len());
            for (i, seed) in seeds.into_iter().enumerate() {
                let stem = dir.join(sample_stem(s, i));
                let a = mtx::load_matrix(stem.with_extension("mtx"))?;
                let b = mtx::load_vector(with_suffix(&stem, "_b.vec"))?;
                let xp = with_suffix(&stem, "_x.vec");
                let x = if xp.exists() { Some(mtx::load_vector(xp)?) } else { None };
                samples.push(TrainSample { a, x, b, seed });
            }
            sets.push(ProblemSet {
                split: s,
                grid_k: manifest.grid,
                seed_base: manifest.seed_base,
                samples,
            });
        }
        let test = sets.pop().unwrap();
        let val = sets.pop().unwrap();
        let train = sets.pop().unwrap();
        Ok(Self { train, val, test })
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}
