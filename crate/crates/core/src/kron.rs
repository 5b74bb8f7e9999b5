//! Kron reduction of a weighted Laplacian onto boundary nodes.
//!
//! Eliminating the interior block by its Schur complement gives the reduced
//! Laplacian `K_red = K_gg - K_gb K_bb^-1 K_bg` and the accompanying matrix
//! `K_ac = -K_gb K_bb^-1` mapping interior load disturbances onto boundary
//! buses. Reduced edge weights are laid out over the complete graph on the
//! boundary nodes, pairs (i, j) with i < j in lexicographic order; absent
//! synthetic lines appear as zero weights.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::{NetworkModel, WeightedLaplacian};
use crate::scalar::{fmax, Real};

#[derive(Debug, Error)]
pub enum KronError {
    #[error("partition: node {node} appears in both gamma and beta")]
    OverlappingPartition { node: usize },
    #[error("partition: node {node} is in neither gamma nor beta")]
    IncompletePartition { node: usize },
    #[error("partition: index {node} out of range (n = {n})")]
    IndexOutOfRange { node: usize, n: usize },
    #[error("boundary set is empty")]
    EmptyBoundary,
    #[error("interior block is singular; interior component {component:?} has no path to the boundary")]
    SingularInterior { component: Vec<usize> },
    #[error("reduced matrix asymmetric: |K[{i},{j}] - K[{j},{i}]| = {delta}")]
    Asymmetric { i: usize, j: usize, delta: f64 },
    #[error("matrix is not a Laplacian: row {row} sums to {sum}")]
    NonZeroRowSum { row: usize, sum: f64 },
    #[error("matrix is not a Laplacian: negative off-diagonal {value} at ({i},{j})")]
    NegativeOffDiagonal { i: usize, j: usize, value: f64 },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Blocks of a Laplacian partitioned by boundary (gamma) and interior (beta).
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianBlocks<F> {
    pub gg: DMatrix<F>,
    pub gb: DMatrix<F>,
    pub bg: DMatrix<F>,
    pub bb: DMatrix<F>,
}

fn check_partition<F: Real>(
    k: &WeightedLaplacian<F>,
    gamma: &[usize],
    beta: &[usize],
) -> Result<(), KronError> {
    let n = k.n();
    let mut tag = vec![0u8; n];
    for &g in gamma {
        if g >= n {
            return Err(KronError::IndexOutOfRange { node: g, n });
        }
        if tag[g] != 0 {
            return Err(KronError::OverlappingPartition { node: g });
        }
        tag[g] = 1;
    }
    for &b in beta {
        if b >= n {
            return Err(KronError::IndexOutOfRange { node: b, n });
        }
        if tag[b] != 0 {
            return Err(KronError::OverlappingPartition { node: b });
        }
        tag[b] = 2;
    }
    if let Some(node) = tag.iter().position(|&t| t == 0) {
        return Err(KronError::IncompletePartition { node });
    }
    Ok(())
}

fn gather<F: Real>(k: &DMatrix<F>, rows: &[usize], cols: &[usize]) -> DMatrix<F> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| k[(rows[a], cols[b])])
}

/// Extract the four partition blocks in the given node orderings.
pub fn partition<F: Real>(
    k: &WeightedLaplacian<F>,
    gamma: &[usize],
    beta: &[usize],
) -> Result<LaplacianBlocks<F>, KronError> {
    check_partition(k, gamma, beta)?;
    let m = k.matrix();
    Ok(LaplacianBlocks {
        gg: gather(m, gamma, gamma),
        gb: gather(m, gamma, beta),
        bg: gather(m, beta, gamma),
        bb: gather(m, beta, beta),
    })
}

/// Interior connected components (through interior-interior edges) that have
/// no edge to any boundary node. Nonempty output means `K_bb` is singular.
fn stranded_interior<F: Real>(k: &DMatrix<F>, gamma: &[usize], beta: &[usize]) -> Vec<Vec<usize>> {
    let mut comp = vec![usize::MAX; k.nrows()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for &start in beta {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in beta {
                if comp[v] == usize::MAX && k[(u, v)] != F::zero() {
                    comp[v] = id;
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        comps.push(members);
    }
    comps
        .into_iter()
        .filter(|members| {
            !members
                .iter()
                .any(|&b| gamma.iter().any(|&g| k[(b, g)] != F::zero()))
        })
        .collect()
}

/// Kron-reduce `K` onto the boundary set: `(K_red, K_ac)`.
pub fn kron_reduce<F: Real>(
    k: &WeightedLaplacian<F>,
    gamma: &[usize],
    beta: &[usize],
) -> Result<(DMatrix<F>, DMatrix<F>), KronError> {
    if gamma.is_empty() {
        return Err(KronError::EmptyBoundary);
    }
    let blocks = partition(k, gamma, beta)?;
    if beta.is_empty() {
        return Ok((blocks.gg, DMatrix::zeros(gamma.len(), 0)));
    }
    if let Some(component) = stranded_interior(k.matrix(), gamma, beta).into_iter().next() {
        return Err(KronError::SingularInterior { component });
    }
    let lu = blocks.bb.clone().lu();
    // X = K_bb^-1 K_bg, so K_red = K_gg - K_gb X and K_ac = -X^T (K symmetric).
    let x = lu
        .solve(&blocks.bg)
        .ok_or_else(|| KronError::SingularInterior { component: beta.to_vec() })?;
    let k_red = &blocks.gg - &blocks.gb * &x;
    let k_ac = -x.transpose();
    Ok((k_red, k_ac))
}

/// Number of complete-graph edges over `g` nodes.
pub fn n_complete_edges(g: usize) -> usize {
    g * (g - 1) / 2
}

/// Index of pair (i, j), i < j, in the complete-graph edge ordering.
pub fn edge_index(i: usize, j: usize, g: usize) -> usize {
    debug_assert!(i < j && j < g);
    i * (2 * g - i - 1) / 2 + (j - i - 1)
}

/// Complete-graph edge list over `g` nodes: (i, j), i < j, lexicographic.
pub fn complete_edges(g: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(n_complete_edges(g));
    for i in 0..g {
        for j in (i + 1)..g {
            edges.push((i, j));
        }
    }
    edges
}

/// Incidence matrix of the complete graph on `g` nodes, edge order as in
/// [`complete_edges`].
pub fn incidence_complete<F: Real>(g: usize) -> DMatrix<F> {
    let edges = complete_edges(g);
    let mut c = DMatrix::zeros(g, edges.len());
    for (e, &(i, j)) in edges.iter().enumerate() {
        c[(i, e)] = F::one();
        c[(j, e)] = -F::one();
    }
    c
}

/// Rebuild the reduced Laplacian from complete-graph edge weights:
/// `-C_r diag(k_r) C_r^T`.
pub fn laplacian_from_weights<F: Real>(k_r: &DVector<F>, g: usize) -> DMatrix<F> {
    assert_eq!(k_r.len(), n_complete_edges(g), "weight vector length mismatch");
    let mut k = DMatrix::zeros(g, g);
    for (e, &(i, j)) in complete_edges(g).iter().enumerate() {
        let w = k_r[e];
        k[(i, j)] = w;
        k[(j, i)] = w;
        k[(i, i)] -= w;
        k[(j, j)] -= w;
    }
    k
}

/// Read the reduced edge weights off a reduced Laplacian, validating that it
/// is a symmetric Laplacian. Off-diagonal roundoff below 1e-9 is clamped to
/// zero; anything larger is rejected.
pub fn reduced_edge_weights<F: Real>(k_red: &DMatrix<F>) -> Result<DVector<F>, KronError> {
    let g = k_red.nrows();
    if k_red.ncols() != g {
        return Err(KronError::NotSquare { rows: g, cols: k_red.ncols() });
    }
    let sym_tol = F::of(1e-9);
    let scale = k_red.iter().fold(F::one(), |acc, v| fmax(acc, v.abs()));
    let row_tol = F::of(1e-8) * scale;
    for i in 0..g {
        for j in (i + 1)..g {
            let delta = (k_red[(i, j)] - k_red[(j, i)]).abs();
            if delta > sym_tol {
                return Err(KronError::Asymmetric { i, j, delta: delta.lossy_f64() });
            }
        }
        let sum = k_red.row(i).iter().fold(F::zero(), |a, &b| a + b);
        if sum.abs() > row_tol {
            return Err(KronError::NonZeroRowSum { row: i, sum: sum.lossy_f64() });
        }
    }
    let mut k_r = DVector::zeros(n_complete_edges(g));
    for (e, &(i, j)) in complete_edges(g).iter().enumerate() {
        let w = k_red[(i, j)];
        if w < -sym_tol {
            return Err(KronError::NegativeOffDiagonal { i, j, value: w.lossy_f64() });
        }
        k_r[e] = fmax(w, F::zero());
    }
    Ok(k_r)
}

/// A Kron-reduced system: reduced Laplacian, accompanying matrix, complete-
/// graph edge weights, and the boundary-node dynamic parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel<F> {
    /// External ids of boundary buses, in reduction order.
    pub boundary: Vec<usize>,
    /// External ids of interior buses; column e of `k_ac` maps the load at
    /// `interior[e]` onto the boundary.
    pub interior: Vec<usize>,
    pub k_red: DMatrix<F>,
    pub k_ac: DMatrix<F>,
    /// Reduced edge weights over the complete boundary graph.
    pub k_r: DVector<F>,
    pub m: DVector<F>,
    pub d: DVector<F>,
    pub t: DVector<F>,
    pub r: DVector<F>,
}

impl<F: Real> ReducedModel<F> {
    pub fn n_boundary(&self) -> usize {
        self.boundary.len()
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    /// Same public context (K_ac, t, r, orderings) with replaced optimizable
    /// parameters; K_red is rebuilt from the weights.
    pub fn with_parameters(&self, k_r: DVector<F>, m: DVector<F>, d: DVector<F>) -> Self {
        let g = self.n_boundary();
        assert_eq!(k_r.len(), n_complete_edges(g));
        assert_eq!(m.len(), g);
        assert_eq!(d.len(), g);
        Self {
            boundary: self.boundary.clone(),
            interior: self.interior.clone(),
            k_red: laplacian_from_weights(&k_r, g),
            k_ac: self.k_ac.clone(),
            k_r,
            m,
            d,
            t: self.t.clone(),
            r: self.r.clone(),
        }
    }
}

/// Kron-reduce a validated network onto its boundary set.
pub fn reduce_network<F: Real>(net: &NetworkModel<F>) -> Result<ReducedModel<F>, KronError> {
    let lap = net.laplacian();
    let (k_red, k_ac) = kron_reduce(&lap, &net.boundary, &net.interior)?;
    let k_r = reduced_edge_weights(&k_red)?;
    let (m, d, t, r) = net.boundary_params();
    // Canonicalize through the edge-weight representation so every consumer
    // sees exactly -C_r diag(k_r) C_r^T.
    let k_red = laplacian_from_weights(&k_r, net.boundary.len());
    Ok(ReducedModel {
        boundary: net.boundary_ids(),
        interior: net.interior_ids(),
        k_red,
        k_ac,
        k_r,
        m,
        d,
        t,
        r,
    })
}
