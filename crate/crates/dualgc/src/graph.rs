//! Graph representation, symmetric normalization, and synthetic graph
//! generation for desk-scale verification.
//!
//! Adjacency is kept in sparse edge-set form; dense N×N matrices are
//! materialized only below a configurable node cap so the largest supported
//! datasets never trigger an accidental quadratic blowup.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream, sub_rng};

/// Largest node count for which dense N×N matrices may be materialized.
pub const DEFAULT_DENSE_CAP: usize = 25_000;

/// An undirected attributed graph with optional node labels.
#[derive(Debug, Clone)]
pub struct Graph {
    features: Array2<f64>,
    /// Canonical undirected edge set: pairs stored as (min, max), deduplicated.
    edges: BTreeSet<(usize, usize)>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Graph {
    /// Build a graph from raw parts, validating every structural invariant.
    ///
    /// Edges are symmetrized and deduplicated; self-loops in the input are
    /// rejected (they are introduced only during normalization). When
    /// `num_classes` is omitted it is inferred as `max(label) + 1`.
    pub fn build(
        features: Vec<Vec<f64>>,
        edges: &[(usize, usize)],
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let n = features.len();
        let d = features.first().map_or(0, Vec::len);
        for (row, r) in features.iter().enumerate() {
            if r.len() != d {
                return Err(Error::RaggedFeatures {
                    row,
                    got: r.len(),
                    expected: d,
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite feature value in row {row}"
                )));
            }
        }
        let mut x = Array2::zeros((n, d));
        for (i, row) in features.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        Self::from_matrix(x, edges, labels, num_classes)
    }

    /// Build from an already-rectangular feature matrix.
    pub fn from_matrix(
        features: Array2<f64>,
        edges: &[(usize, usize)],
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let n = features.nrows();
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature value".into()));
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n {
                return Err(Error::IndexOutOfRange { index: u, nodes: n });
            }
            if v >= n {
                return Err(Error::IndexOutOfRange { index: v, nodes: n });
            }
            if u == v {
                return Err(Error::SelfLoop(u));
            }
            set.insert((u.min(v), u.max(v)));
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(Error::LabelsLength {
                    got: l.len(),
                    expected: n,
                });
            }
        }
        let num_classes = match (num_classes, &labels) {
            (Some(c), _) => c,
            (None, Some(l)) => l.iter().max().map_or(1, |m| m + 1),
            (None, None) => 1,
        };
        if num_classes == 0 {
            return Err(Error::InvalidParameter(
                "num_classes must be positive".into(),
            ));
        }
        if let Some(ref l) = labels {
            for &lab in l {
                if lab >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: lab,
                        classes: num_classes,
                    });
                }
            }
        }
        Ok(Self {
            features,
            edges: set,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Canonicalized undirected edges as (min, max) pairs in sorted order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Per-node neighbor lists (sorted by index).
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    /// Dense 0/1 adjacency. `self_loops` adds the identity. Guarded by the
    /// dense materialization cap.
    pub fn adjacency_dense(&self, self_loops: bool) -> Result<Array2<f64>> {
        check_dense_cap(self.num_nodes())?;
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        if self_loops {
            for i in 0..n {
                a[[i, i]] = 1.0;
            }
        }
        Ok(a)
    }
}

fn check_dense_cap(n: usize) -> Result<()> {
    if n > DEFAULT_DENSE_CAP {
        return Err(Error::InvalidParameter(format!(
            "dense N x N materialization refused: N = {n} exceeds cap {DEFAULT_DENSE_CAP}"
        )));
    }
    Ok(())
}

/// Symmetrically normalized self-looped adjacency D̂^{-1/2} Â D̂^{-1/2},
/// stored as sorted sparse rows.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Dense form, guarded by the materialization cap.
    pub fn dense(&self) -> Result<Array2<f64>> {
        check_dense_cap(self.num_nodes())?;
        let n = self.num_nodes();
        let mut m = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[[i, j]] = v;
            }
        }
        Ok(m)
    }

    /// Sparse-dense product `Ã · H`. Each output row is an independent work
    /// unit accumulated in index order, so the result is bitwise identical
    /// across thread counts.
    pub fn matmul(&self, h: &Array2<f64>) -> Array2<f64> {
        let n = self.num_nodes();
        let d = h.ncols();
        assert_eq!(h.nrows(), n, "row count mismatch in adjacency product");
        let out_rows = par::map_indexed(n, |i| {
            let mut acc = vec![0.0; d];
            for &(j, w) in &self.rows[i] {
                let src = h.row(j);
                for (a, &v) in acc.iter_mut().zip(src.iter()) {
                    *a += w * v;
                }
            }
            acc
        });
        let mut out = Array2::zeros((n, d));
        for (i, row) in out_rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Matrix-vector product `Ã · v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        par::map_indexed(self.num_nodes(), |i| {
            self.rows[i].iter().map(|&(j, w)| w * v[j]).sum()
        })
    }
}

/// Compute Ã = D̂^{-1/2} Â D̂^{-1/2} where Â adds one self-loop per node.
/// Every node has positive degree thanks to the self-loop, so normalization
/// never fails; an edgeless graph yields the identity.
pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let mut degree = vec![1.0f64; n]; // self-loop contribution
    for (u, v) in g.edges() {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| vec![(i, inv_sqrt[i] * inv_sqrt[i])])
        .collect();
    for (u, v) in g.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        rows[u].push((v, w));
        rows[v].push((u, w));
    }
    for row in &mut rows {
        row.sort_unstable_by_key(|&(j, _)| j);
    }
    NormalizedAdjacency { rows }
}

/// Sample a stochastic-block-model graph: `p_in` within blocks, `p_out`
/// across, Gaussian features around each block's mean, labels = block ids.
/// Bit-reproducible for a fixed seed.
pub fn sbm_generate(
    block_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    feature_means: &[Vec<f64>],
    feature_std: f64,
    seed: u64,
) -> Result<Graph> {
    if block_sizes.is_empty() || block_sizes.contains(&0) {
        return Err(Error::InvalidParameter("empty block".into()));
    }
    if feature_means.len() != block_sizes.len() {
        return Err(Error::InvalidParameter(format!(
            "got {} feature means for {} blocks",
            feature_means.len(),
            block_sizes.len()
        )));
    }
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out > p_in {
        return Err(Error::InvalidParameter(
            "probabilities must satisfy 0 <= p_out <= p_in <= 1".into(),
        ));
    }
    if feature_std < 0.0 {
        return Err(Error::InvalidParameter(
            "feature_std must be nonnegative".into(),
        ));
    }
    let d = feature_means[0].len();
    if feature_means.iter().any(|m| m.len() != d) {
        return Err(Error::InvalidParameter(
            "feature means must share one dimensionality".into(),
        ));
    }

    let n: usize = block_sizes.iter().sum();
    let mut block_of = Vec::with_capacity(n);
    for (b, &size) in block_sizes.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(b, size));
    }

    let mut edge_rng = sub_rng(seed, stream::SBM_EDGES);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block_of[i] == block_of[j] {
                p_in
            } else {
                p_out
            };
            if edge_rng.random_range(0.0..1.0) < p {
                edges.push((i, j));
            }
        }
    }

    let mut feat_rng = sub_rng(seed, stream::SBM_FEATURES);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Array2::zeros((n, d));
    for i in 0..n {
        let mean = &feature_means[block_of[i]];
        for j in 0..d {
            features[[i, j]] = mean[j] + feature_std * normal.sample(&mut feat_rng);
        }
    }

    Graph::from_matrix(features, &edges, Some(block_of), Some(block_sizes.len()))
}
