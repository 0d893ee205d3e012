//! Coates-graph encoding of a sparse matrix for message passing.
//!
//! One directed edge per stored entry of `A` after diagonal completion.
//! The entry `A_ij` is the edge from node `j` into node `i`, so the in-edges
//! of node `i` are exactly the stored entries of row `i`, and they occupy a
//! contiguous range of the edge list (CSR order).

use std::ops::Range;

use crate::sparse::CsrMatrix;

pub const NODE_FEATURES: usize = 8;
pub const EDGE_FEATURES: usize = 2;

#[derive(Debug, Clone)]
pub struct CoatesGraph {
    /// `add_missing_diagonal(A)`; edge `k` is storage position `k`.
    pattern: CsrMatrix,
    edge_rows: Vec<usize>,
    /// `[a_ij, pos_ij]` per edge.
    edge_feats: Vec<[f64; EDGE_FEATURES]>,
    /// Standardized per graph.
    node_feats: Vec<[f64; NODE_FEATURES]>,
    lower: TriangleMap,
    upper: TriangleMap,
}

/// Where the entries of one triangular factor come from in the edge list.
#[derive(Debug, Clone)]
pub struct TriangleMap {
    /// Pattern of the factor (values are zero).
    pub pattern: CsrMatrix,
    /// Edge feeding each stored entry, in the factor's storage order.
    pub edges: Vec<usize>,
    /// Whether each stored entry lies on the diagonal.
    pub diagonal: Vec<bool>,
}

impl TriangleMap {
    fn from_pattern(full: &CsrMatrix, triangle: CsrMatrix) -> Self {
        let mut edges = Vec::with_capacity(triangle.nnz());
        let mut diagonal = Vec::with_capacity(triangle.nnz());
        for (i, j, _) in triangle.triples() {
            edges.push(full.position(i, j).expect("triangle is a sub-pattern"));
            diagonal.push(i == j);
        }
        let pattern = triangle.with_values(vec![0.0; edges.len()]).expect("same pattern");
        Self {
            pattern,
            edges,
            diagonal,
        }
    }
}

/// Positional code of entry (i, j): +1 above the diagonal, −1 below, 0 on it.
pub fn positional_code(i: usize, j: usize) -> f64 {
    match i.cmp(&j) {
        std::cmp::Ordering::Less => 1.0,
        std::cmp::Ordering::Greater => -1.0,
        std::cmp::Ordering::Equal => 0.0,
    }
}

impl CoatesGraph {
    pub fn from_matrix(a: &CsrMatrix) -> Self {
        let pattern = a.add_missing_diagonal();
        let mut node_feats = node_features(&pattern);
        standardize(&mut node_feats);
        Self::assemble(pattern, node_feats, None)
    }

    fn assemble(
        pattern: CsrMatrix,
        node_feats: Vec<[f64; NODE_FEATURES]>,
        edge_feats: Option<Vec<[f64; EDGE_FEATURES]>>,
    ) -> Self {
        let edge_rows: Vec<usize> = pattern.triples().map(|(i, _, _)| i).collect();
        let edge_feats = edge_feats.unwrap_or_else(|| {
            pattern
                .triples()
                .map(|(i, j, v)| [v, positional_code(i, j)])
                .collect()
        });
        let lower = TriangleMap::from_pattern(&pattern, pattern.lower_part());
        let upper = TriangleMap::from_pattern(&pattern, pattern.upper_part());
        Self {
            pattern,
            edge_rows,
            edge_feats,
            node_feats,
            lower,
            upper,
        }
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn num_edges(&self) -> usize {
        self.pattern.nnz()
    }

    pub fn pattern(&self) -> &CsrMatrix {
        &self.pattern
    }

    /// Destination node `i` of each edge (the matrix row).
    pub fn edge_rows(&self) -> &[usize] {
        &self.edge_rows
    }

    /// Source node `j` of each edge (the matrix column).
    pub fn edge_cols(&self) -> &[usize] {
        self.pattern.col_idx()
    }

    pub fn edge_feats(&self) -> &[[f64; EDGE_FEATURES]] {
        &self.edge_feats
    }

    pub fn node_feats(&self) -> &[[f64; NODE_FEATURES]] {
        &self.node_feats
    }

    /// Edges aggregated into node `i`; the neighbourhood is their sources.
    pub fn in_edges(&self, i: usize) -> Range<usize> {
        self.pattern.row_ptr()[i]..self.pattern.row_ptr()[i + 1]
    }

    pub fn lower(&self) -> &TriangleMap {
        &self.lower
    }

    pub fn upper(&self) -> &TriangleMap {
        &self.upper
    }

    /// Relabels node `i` as `perm[i]`, carrying node and edge features along
    /// unchanged (positional codes included).
    pub fn relabel(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n());
        let mut moved: Vec<(usize, usize, usize)> = self
            .pattern
            .triples()
            .enumerate()
            .map(|(k, (i, j, _))| (perm[i], perm[j], k))
            .collect();
        moved.sort_unstable();
        let triples: Vec<_> = moved.iter().map(|&(i, j, k)| (i, j, self.pattern.values()[k])).collect();
        let pattern = CsrMatrix::from_coo(self.n(), &triples).expect("valid permutation");
        let edge_feats = moved.iter().map(|&(_, _, k)| self.edge_feats[k]).collect();
        let mut node_feats = vec![[0.0; NODE_FEATURES]; self.n()];
        for (i, &p) in perm.iter().enumerate() {
            node_feats[p] = self.node_feats[i];
        }
        Self::assemble(pattern, node_feats, Some(edge_feats))
    }
}

/// Raw structural features per node, computed on the given pattern:
/// row nnz, column nnz, row 1-norm, column 1-norm, diagonal value,
/// diagonal dominance `|a_ii| / row 1-norm`, row max `|a_ij|`, column max `|a_ij|`.
pub fn node_features(a: &CsrMatrix) -> Vec<[f64; NODE_FEATURES]> {
    let n = a.n();
    let mut feats = vec![[0.0; NODE_FEATURES]; n];
    for (i, j, v) in a.triples() {
        let av = v.abs();
        feats[i][0] += 1.0;
        feats[j][1] += 1.0;
        feats[i][2] += av;
        feats[j][3] += av;
        if i == j {
            feats[i][4] = v;
        }
        feats[i][6] = feats[i][6].max(av);
        feats[j][7] = feats[j][7].max(av);
    }
    for f in &mut feats {
        f[5] = if f[2] > 0.0 { f[4].abs() / f[2] } else { 0.0 };
    }
    feats
}

/// Per-feature standardization to zero mean and unit population variance.
/// Features with (numerically) zero spread are set to 0.
pub fn standardize(feats: &mut [[f64; NODE_FEATURES]]) {
    let n = feats.len();
    if n == 0 {
        return;
    }
    for c in 0..NODE_FEATURES {
        let mean = feats.iter().map(|f| f[c]).sum::<f64>() / n as f64;
        let var = feats.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            feats.iter_mut().for_each(|f| f[c] = 0.0);
        } else {
            feats.iter_mut().for_each(|f| f[c] = (f[c] - mean) / std);
        }
    }
}
