mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use common::*;
use learned_ilu::dataset::*;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn counts(train: usize, val: usize, test: usize) -> SplitCounts {
    SplitCounts { train, val, test }
}

#[test]
fn generation_is_reproducible_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_dataset(5, counts(3, 2, 2), 7).unwrap().save(a.path()).unwrap();
    make_dataset(5, counts(3, 2, 2), 7).unwrap().save(b.path()).unwrap();
    let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(x.len(), 1 + 3 * 3 + 2 * 3 + 2 * 2);
    assert_eq!(x, y);
}

#[test]
fn save_and_load_round_trip() {
    let d = make_dataset(4, counts(2, 1, 1), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), d);
}

#[test]
fn supervised_samples_are_solved() {
    let d = make_dataset(6, counts(4, 2, 2), 1).unwrap();
    for s in d.train.samples.iter().chain(&d.val.samples) {
        let x = s.x.as_ref().unwrap();
        let ax = s.a.spmv(x).unwrap();
        let r: Vec<f64> = ax.iter().zip(&s.b).map(|(p, q)| p - q).collect();
        assert!(norm(&r) < REFERENCE_RESIDUAL * norm(&s.b));
        let oracle = ge_solve(&dense_of(&s.a), &s.b);
        assert!(max_abs_diff(x, &oracle) < 1e-6 * norm(&oracle));
    }
    for s in &d.test.samples {
        assert!(s.x.is_none());
        assert_eq!(s.b, rhs_source(6));
    }
}

#[test]
fn problems_keep_the_stencil_pattern() {
    let base = poisson2d(5);
    let d = make_dataset(5, counts(2, 1, 1), 2).unwrap();
    for s in d.train.samples.iter().chain(&d.test.samples) {
        assert!(s.a.same_pattern(&base));
        assert!(s.a.values() != base.values());
    }
}

#[test]
fn seeds_never_collide_across_splits() {
    let d = make_dataset(3, counts(5, 5, 5), 0).unwrap();
    let seeds: HashSet<u64> = Split::ALL
        .iter()
        .flat_map(|&s| d.split(s).samples.iter().map(|t| t.seed).collect::<Vec<_>>())
        .collect();
    assert_eq!(seeds.len(), 15);
    assert_eq!(d.test.samples[0].seed, 2 * SPLIT_SEED_STRIDE);
}

#[test]
fn bad_requests_are_rejected() {
    assert!(make_dataset(1, counts(1, 1, 1), 0).is_err());
    assert!(make_dataset(4, counts(0, 1, 1), 0).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn poisson_matches_the_stencil() {
    let a = poisson2d(3);
    let d = dense_of(&a);
    assert_eq!(d[4], vec![0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0]);
    assert_eq!(a.nnz(), 9 + 2 * 12);
    // symmetric positive definite
    assert!(cholesky(&d).is_some());
}
