mod common;

use common::*;
use learned_ilu::mtx;
use learned_ilu::CsrMatrix;
use proptest::prelude::*;

fn triples_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
    (1usize..12).prop_flat_map(|n| {
        let entry = (0..n, 0..n, -10.0f64..10.0);
        (Just(n), prop::collection::vec(entry, 0..40))
    })
}

fn lower_with_diag() -> impl Strategy<Value = CsrMatrix> {
    (1usize..10, any::<u64>()).prop_map(|(n, seed)| {
        let mut r = rng(seed);
        let mut t = Vec::new();
        for i in 0..n {
            use rand::Rng;
            let d: f64 = r.random_range(0.5..2.0);
            t.push((i, i, if r.random::<bool>() { d } else { -d }));
            for j in 0..i {
                if r.random::<f64>() < 0.4 {
                    t.push((i, j, r.random_range(-1.0..1.0)));
                }
            }
        }
        CsrMatrix::from_coo(n, &t).unwrap()
    })
}

proptest! {
    #[test]
    fn spmv_matches_dense((n, t) in triples_strategy(), seed in any::<u64>()) {
        let a = CsrMatrix::from_coo(n, &t).unwrap();
        let x = random_vector(&mut rng(seed), n);
        let d = dense_of(&a);
        prop_assert!(max_abs_diff(&a.spmv(&x).unwrap(), &matvec(&d, &x)) < 1e-10);
        let dt = transpose(&d);
        prop_assert!(max_abs_diff(&a.spmv_transpose(&x).unwrap(), &matvec(&dt, &x)) < 1e-10);
    }

    #[test]
    fn duplicates_are_summed((n, t) in triples_strategy()) {
        let a = CsrMatrix::from_coo(n, &t).unwrap();
        let mut d = vec![vec![0.0; n]; n];
        for &(i, j, v) in &t {
            d[i][j] += v;
        }
        let got = dense_of(&a);
        for i in 0..n {
            prop_assert!(max_abs_diff(&got[i], &d[i]) < 1e-12);
        }
    }

    #[test]
    fn add_missing_diagonal_is_idempotent((n, t) in triples_strategy()) {
        let a = CsrMatrix::from_coo(n, &t).unwrap();
        let once = a.add_missing_diagonal();
        prop_assert_eq!(once.add_missing_diagonal(), once.clone());
        for i in 0..n {
            prop_assert!(once.position(i, i).is_some());
            prop_assert_eq!(once.get(i, i), Some(a.get(i, i).unwrap_or(0.0)));
        }
    }

    #[test]
    fn transpose_is_an_involution((n, t) in triples_strategy()) {
        let a = CsrMatrix::from_coo(n, &t).unwrap();
        prop_assert_eq!(a.transpose().transpose(), a.clone());
    }

    #[test]
    fn lower_solve_matches_elimination(l in lower_with_diag(), seed in any::<u64>()) {
        let n = l.n();
        let b = random_vector(&mut rng(seed), n);
        let x = l.lower_tri_solve(&b).unwrap();
        let oracle = ge_solve(&dense_of(&l), &b);
        prop_assert!(max_abs_diff(&x, &oracle) < 1e-8 * (1.0 + norm(&oracle)));
        let u = l.transpose();
        let y = u.upper_tri_solve(&b).unwrap();
        prop_assert!(max_abs_diff(&y, &ge_solve(&dense_of(&u), &b)) < 1e-8 * (1.0 + norm(&y)));
        let yt = l.lower_tri_solve_transpose(&b).unwrap();
        prop_assert!(max_abs_diff(&yt, &ge_solve(&transpose(&dense_of(&l)), &b)) < 1e-8 * (1.0 + norm(&yt)));
    }

    #[test]
    fn matrix_market_round_trip_is_exact((n, t) in triples_strategy()) {
        let a = CsrMatrix::from_coo(n, &t).unwrap();
        let mut buf = Vec::new();
        mtx::write_matrix(&mut buf, &a).unwrap();
        let back = mtx::read_matrix(buf.as_slice()).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn product_matches_dense((n, t) in triples_strategy(), seed in any::<u64>()) {
        let a = CsrMatrix::from_coo(n, &t).unwrap();
        let b = random_sparse(&mut rng(seed), n, 0.3, 1.0);
        let got = dense_of(&a.matmul(&b).unwrap());
        let want = matmul(&dense_of(&a), &dense_of(&b));
        for i in 0..n {
            prop_assert!(max_abs_diff(&got[i], &want[i]) < 1e-10);
        }
    }

    #[test]
    fn permutation_preserves_entries((n, t) in triples_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let a = CsrMatrix::from_coo(n, &t).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed));
        let p = a.permute(&perm).unwrap();
        for (i, j, v) in a.triples() {
            prop_assert_eq!(p.get(perm[i], perm[j]), Some(v));
        }
        prop_assert_eq!(p.nnz(), a.nnz());
    }
}

#[test]
fn explicit_zeros_are_kept() {
    let a = CsrMatrix::from_coo(2, &[(0, 0, 1.0), (0, 1, 0.0), (1, 1, 2.0)]).unwrap();
    assert_eq!(a.nnz(), 3);
    assert_eq!(a.get(0, 1), Some(0.0));
    assert_eq!(a.get(1, 0), None);
}

#[test]
fn symmetric_matrix_market_is_expanded() {
    let text = "%%MatrixMarket matrix coordinate real symmetric\n% comment\n2 2 2\n1 1 4.0\n2 1 -1.5\n";
    let a = mtx::read_matrix(text.as_bytes()).unwrap();
    assert_eq!(a.get(0, 1), Some(-1.5));
    assert_eq!(a.get(1, 0), Some(-1.5));
    assert_eq!(a.nnz(), 3);
}

#[test]
fn malformed_matrix_market_is_rejected() {
    for text in [
        "",
        "%%MatrixMarket matrix array real general\n1 1\n1.0\n",
        "%%MatrixMarket matrix coordinate real general\n2 3 1\n1 1 1.0\n",
        "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n",
        "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n",
        "%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 abc\n",
    ] {
        assert!(mtx::read_matrix(text.as_bytes()).is_err(), "accepted {text:?}");
    }
}

#[test]
fn vector_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vec");
    let v = vec![0.1, -2.5e-300, 1.0 / 3.0, 7e12];
    mtx::save_vector(&path, &v).unwrap();
    assert_eq!(mtx::load_vector(&path).unwrap(), v);
}
