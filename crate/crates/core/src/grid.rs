//! Network domain types, weighted-Laplacian and incidence construction,
//! network file I/O and validation.
//!
//! Nodes are stored in file order; `Edge` and partition sets refer to nodes
//! by position (0-based index), while `NodeParams::id` keeps the external bus
//! number used in files and reports. The Laplacian follows the convention
//! `K = -C diag(k) C^T`: positive off-diagonals `k_ij`, negative diagonal,
//! zero row sums.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed network file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate node id {id}")]
    DuplicateNodeId { id: usize },
    #[error("unknown node id {id}")]
    UnknownNodeId { id: usize },
    #[error("edge ({from}, {to}): node index out of range (n = {n})")]
    IndexOutOfRange { from: usize, to: usize, n: usize },
    #[error("self-loop on node {node}")]
    SelfLoop { node: usize },
    #[error("duplicate edge between {from} and {to}")]
    DuplicateEdge { from: usize, to: usize },
    #[error("edge ({from}, {to}): non-positive weight {value}")]
    NonPositiveWeight { from: usize, to: usize, value: f64 },
    #[error("edge ({from}, {to}): non-positive reactance {value}")]
    NonPositiveReactance { from: usize, to: usize, value: f64 },
    #[error("edge ({from}, {to}): nominal angle spread {spread} rad >= pi/2")]
    AngleSpreadTooLarge { from: usize, to: usize, spread: f64 },
    #[error("edge ({from}, {to}): neither a weight nor a reactance given")]
    MissingEdgeParam { from: usize, to: usize },
    #[error("nominal point: non-positive voltage at position {index}")]
    NonPositiveVoltage { index: usize },
    #[error("nominal point: expected {expected} entries, got {got}")]
    NominalLengthMismatch { expected: usize, got: usize },
    #[error("boundary lists node id {id} more than once")]
    DuplicateBoundary { id: usize },
    #[error("generator node {id} is not a boundary node")]
    GeneratorNotBoundary { id: usize },
    #[error("interior node {id} has nonzero damping")]
    InteriorDamping { id: usize },
    #[error("non-generator node {id} has nonzero inertia, governor rate, or droop")]
    NonGeneratorDynamics { id: usize },
    #[error("generator node {id} must have positive inertia and governor rate")]
    InvalidGeneratorParams { id: usize },
    #[error("network is disconnected; nodes {component:?} unreachable from node {root}")]
    Disconnected { root: usize, component: Vec<usize> },
    #[error("network has no nodes")]
    Empty,
}

/// Per-node dynamic parameters. Diagonal entries of M, D, T, R plus the
/// nominal load consumed at the bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams<F> {
    /// External bus number, as used in files and reports.
    pub id: usize,
    pub is_generator: bool,
    /// Inertia m (p.u. power * s / p.u. frequency); zero for non-generators.
    pub inertia: F,
    /// Damping d (p.u. power / p.u. frequency).
    pub damping: F,
    /// Governor rate t (1/s), the diagonal entry of T; zero for non-generators.
    pub governor_rate: F,
    /// Droop constant r (p.u.), the diagonal entry of R; zero for non-generators.
    pub droop: F,
    /// Nominal load (p.u. power).
    pub load: F,
}

impl<F: Real> NodeParams<F> {
    /// A generator node with the given dynamic parameters.
    pub fn generator(id: usize, inertia: F, damping: F, governor_rate: F, droop: F, load: F) -> Self {
        Self { id, is_generator: true, inertia, damping, governor_rate, droop, load }
    }

    /// A load (non-generator) node; m, t, r are zero by construction.
    pub fn passive(id: usize, damping: F, load: F) -> Self {
        Self {
            id,
            is_generator: false,
            inertia: F::zero(),
            damping,
            governor_rate: F::zero(),
            droop: F::zero(),
            load,
        }
    }
}

/// Undirected weighted edge between two node positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge<F> {
    /// Position of the from-node in the node list.
    pub from: usize,
    /// Position of the to-node.
    pub to: usize,
    /// Power-flow sensitivity k (p.u. power / rad), strictly positive.
    pub weight: F,
}

/// Nominal operating point used to derive edge weights from reactances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalPoint<F> {
    pub voltages: Vec<F>,
    pub angles: Vec<F>,
}

impl<F: Real> NominalPoint<F> {
    /// Flat profile: unit voltages, zero angles. With this profile the edge
    /// weight reduces to `1 / x`.
    pub fn flat(n: usize) -> Self {
        Self { voltages: vec![F::one(); n], angles: vec![F::zero(); n] }
    }

    fn validate(&self, n: usize) -> Result<(), GridError> {
        if self.voltages.len() != n || self.angles.len() != n {
            return Err(GridError::NominalLengthMismatch {
                expected: n,
                got: self.voltages.len().min(self.angles.len()),
            });
        }
        for (i, v) in self.voltages.iter().enumerate() {
            if *v <= F::zero() {
                return Err(GridError::NonPositiveVoltage { index: i });
            }
        }
        Ok(())
    }
}

/// Interpretation flags for the governor and droop entries.
///
/// The shipped data stores `t` as the governor rate (1/s) and `r` as the
/// droop constant entering `p_dot = -T (p + R w)` literally. The flags
/// select the inverse readings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    /// Use `1/r` in the governor equation (classic droop convention).
    pub droop_is_inverse: bool,
    /// Treat the stored `t` as a time constant and use `1/t` as the rate.
    pub governor_is_time_constant: bool,
}

/// A validated source network with its boundary/interior partition.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<F> {
    pub nodes: Vec<NodeParams<F>>,
    pub edges: Vec<Edge<F>>,
    /// Positions of boundary nodes, in the order given by the file.
    pub boundary: Vec<usize>,
    /// Positions of interior nodes, in node order.
    pub interior: Vec<usize>,
    pub base_mva: F,
}

/// Dense weighted Laplacian with the Eq.-style sign convention: positive
/// off-diagonal weights, `K_ii = -sum_k k_ik`, exact zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLaplacian<F>(DMatrix<F>);

impl<F: Real> WeightedLaplacian<F> {
    /// Wrap a matrix already known to satisfy the Laplacian invariants,
    /// e.g. the output of a Kron reduction that will be reduced again.
    pub fn from_matrix_unchecked(m: DMatrix<F>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<F> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<F> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

fn check_edges<F: Real>(edges: &[Edge<F>], n: usize) -> Result<(), GridError> {
    let mut seen = HashSet::new();
    for e in edges {
        if e.from >= n || e.to >= n {
            return Err(GridError::IndexOutOfRange { from: e.from, to: e.to, n });
        }
        if e.from == e.to {
            return Err(GridError::SelfLoop { node: e.from });
        }
        let key = (e.from.min(e.to), e.from.max(e.to));
        if !seen.insert(key) {
            return Err(GridError::DuplicateEdge { from: key.0, to: key.1 });
        }
        if e.weight <= F::zero() {
            return Err(GridError::NonPositiveWeight {
                from: e.from,
                to: e.to,
                value: e.weight.lossy_f64(),
            });
        }
    }
    Ok(())
}

/// Build the weighted Laplacian `K` from an edge list: `K_ij = k_ij` for
/// edges, `K_ii = -sum_k k_ik`, zeros elsewhere. Row sums are exactly zero
/// by construction (the diagonal is accumulated from the same additions).
pub fn build_laplacian<F: Real>(edges: &[Edge<F>], n: usize) -> Result<WeightedLaplacian<F>, GridError> {
    check_edges(edges, n)?;
    let mut k = DMatrix::zeros(n, n);
    for e in edges {
        k[(e.from, e.to)] = e.weight;
        k[(e.to, e.from)] = e.weight;
        k[(e.from, e.from)] -= e.weight;
        k[(e.to, e.to)] -= e.weight;
    }
    Ok(WeightedLaplacian(k))
}

/// Node-edge incidence matrix `C` (n x |E|): column e carries +1 at the
/// from-node and -1 at the to-node, so `C diag(k) C^T = -K`.
pub fn incidence_matrix<F: Real>(edges: &[Edge<F>], n: usize) -> Result<DMatrix<F>, GridError> {
    check_edges(edges, n)?;
    let mut c = DMatrix::zeros(n, edges.len());
    for (idx, e) in edges.iter().enumerate() {
        c[(e.from, idx)] = F::one();
        c[(e.to, idx)] = -F::one();
    }
    Ok(c)
}

/// Derive edge weights from line reactances at a nominal operating point:
/// `k_ij = v_i v_j cos(d_i - d_j) / x_ij`.
pub fn derive_edge_weights<F: Real>(
    lines: &[(usize, usize, F)],
    nominal: &NominalPoint<F>,
) -> Result<Vec<Edge<F>>, GridError> {
    let n = nominal.voltages.len();
    nominal.validate(n)?;
    let half_pi = F::frac_pi_2();
    let mut edges = Vec::with_capacity(lines.len());
    for &(from, to, x) in lines {
        if from >= n || to >= n {
            return Err(GridError::IndexOutOfRange { from, to, n });
        }
        if x <= F::zero() {
            return Err(GridError::NonPositiveReactance { from, to, value: x.lossy_f64() });
        }
        let spread = (nominal.angles[from] - nominal.angles[to]).abs();
        if spread >= half_pi {
            return Err(GridError::AngleSpreadTooLarge { from, to, spread: spread.lossy_f64() });
        }
        let weight = nominal.voltages[from] * nominal.voltages[to] * spread.cos() / x;
        edges.push(Edge { from, to, weight });
    }
    Ok(edges)
}

fn connected_check<F: Real>(n: usize, edges: &[Edge<F>], ids: &[usize]) -> Result<(), GridError> {
    if n == 0 {
        return Err(GridError::Empty);
    }
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.from].push(e.to);
        adj[e.to].push(e.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&i| !seen[i]).map(|i| ids[i]).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(GridError::Disconnected { root: ids[0], component: missing })
    }
}

impl<F: Real> NetworkModel<F> {
    /// Validate and assemble a network. `boundary` holds node positions.
    pub fn new(
        nodes: Vec<NodeParams<F>>,
        edges: Vec<Edge<F>>,
        boundary: Vec<usize>,
        base_mva: F,
    ) -> Result<Self, GridError> {
        let n = nodes.len();
        if n == 0 {
            return Err(GridError::Empty);
        }
        let mut ids = HashSet::new();
        for node in &nodes {
            if !ids.insert(node.id) {
                return Err(GridError::DuplicateNodeId { id: node.id });
            }
        }
        let mut on_boundary = vec![false; n];
        for &b in &boundary {
            if b >= n {
                return Err(GridError::IndexOutOfRange { from: b, to: b, n });
            }
            if on_boundary[b] {
                return Err(GridError::DuplicateBoundary { id: nodes[b].id });
            }
            on_boundary[b] = true;
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.is_generator {
                if !on_boundary[i] {
                    return Err(GridError::GeneratorNotBoundary { id: node.id });
                }
                if node.inertia <= F::zero() || node.governor_rate <= F::zero() {
                    return Err(GridError::InvalidGeneratorParams { id: node.id });
                }
            } else if node.inertia != F::zero()
                || node.governor_rate != F::zero()
                || node.droop != F::zero()
            {
                return Err(GridError::NonGeneratorDynamics { id: node.id });
            }
            if !on_boundary[i] && node.damping != F::zero() {
                return Err(GridError::InteriorDamping { id: node.id });
            }
        }
        check_edges(&edges, n)?;
        let id_list: Vec<usize> = nodes.iter().map(|p| p.id).collect();
        connected_check(n, &edges, &id_list)?;
        let interior: Vec<usize> = (0..n).filter(|i| !on_boundary[*i]).collect();
        Ok(Self { nodes, edges, boundary, interior, base_mva })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Weighted Laplacian of the validated edge set.
    pub fn laplacian(&self) -> WeightedLaplacian<F> {
        build_laplacian(&self.edges, self.nodes.len()).expect("edges validated at construction")
    }

    /// Edge weights in edge-list order.
    pub fn edge_weights(&self) -> DVector<F> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.weight))
    }

    /// Same network with a new set of edge weights (same topology).
    pub fn with_edge_weights(&self, weights: &DVector<F>) -> Self {
        assert_eq!(weights.len(), self.edges.len(), "weight count mismatch");
        let mut out = self.clone();
        for (e, w) in out.edges.iter_mut().zip(weights.iter()) {
            e.weight = *w;
        }
        out
    }

    /// Per-class parameter vectors over boundary nodes, in boundary order.
    pub fn boundary_params(&self) -> (DVector<F>, DVector<F>, DVector<F>, DVector<F>) {
        let take = |f: fn(&NodeParams<F>) -> F| {
            DVector::from_iterator(self.boundary.len(), self.boundary.iter().map(|&i| f(&self.nodes[i])))
        };
        (
            take(|p| p.inertia),
            take(|p| p.damping),
            take(|p| p.governor_rate),
            take(|p| p.droop),
        )
    }

    /// External ids of boundary nodes, in boundary order.
    pub fn boundary_ids(&self) -> Vec<usize> {
        self.boundary.iter().map(|&i| self.nodes[i].id).collect()
    }

    /// External ids of interior nodes, in interior order.
    pub fn interior_ids(&self) -> Vec<usize> {
        self.interior.iter().map(|&i| self.nodes[i].id).collect()
    }

    pub fn total_load(&self) -> F {
        self.nodes.iter().fold(F::zero(), |acc, p| acc + p.load)
    }

    /// Position of the node with external id `id`.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|p| p.id == id)
    }

    /// Apply the governor/droop interpretation flags, returning a network
    /// whose stored t and r are the effective diagonal entries.
    pub fn apply_conventions(&self, conv: Conventions) -> Self {
        let mut out = self.clone();
        for node in out.nodes.iter_mut().filter(|p| p.is_generator) {
            if conv.governor_is_time_constant {
                node.governor_rate = F::one() / node.governor_rate;
            }
            if conv.droop_is_inverse && node.droop != F::zero() {
                node.droop = F::one() / node.droop;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(bound(deserialize = "F: Real"))]
struct NodeFile<F> {
    id: usize,
    is_generator: bool,
    #[serde(default = "zero")]
    m: F,
    #[serde(default = "zero")]
    d: F,
    #[serde(default = "zero")]
    t: F,
    #[serde(default = "zero")]
    r: F,
    #[serde(default = "zero")]
    load: F,
}

fn zero<F: Real>() -> F {
    F::zero()
}

#[derive(Serialize, Deserialize)]
struct EdgeFile<F> {
    /// External id of the from-bus.
    from: usize,
    /// External id of the to-bus.
    to: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    x: Option<F>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<F>,
}

#[derive(Serialize, Deserialize)]
struct NominalFile<F> {
    v0: Vec<F>,
    delta0: Vec<F>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(deserialize = "F: Real"))]
struct NetworkFile<F> {
    #[serde(default)]
    base_mva: Option<F>,
    nodes: Vec<NodeFile<F>>,
    edges: Vec<EdgeFile<F>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nominal: Option<NominalFile<F>>,
    /// External ids of boundary buses.
    boundary: Vec<usize>,
}

/// Parse a network from its JSON text. Edge weights are taken directly when
/// `k` is present; otherwise they are derived from `x` at the file's nominal
/// point (flat profile when none is given).
pub fn parse_network_str<F: Real>(text: &str) -> Result<NetworkModel<F>, GridError> {
    let file: NetworkFile<F> = serde_json::from_str(text)?;
    let n = file.nodes.len();
    let mut index = HashMap::new();
    for (i, node) in file.nodes.iter().enumerate() {
        if index.insert(node.id, i).is_some() {
            return Err(GridError::DuplicateNodeId { id: node.id });
        }
    }
    let lookup = |id: usize| index.get(&id).copied().ok_or(GridError::UnknownNodeId { id });

    let nominal = match file.nominal {
        Some(nf) => NominalPoint { voltages: nf.v0, angles: nf.delta0 },
        None => NominalPoint::flat(n),
    };
    nominal.validate(n)?;

    let mut edges = Vec::with_capacity(file.edges.len());
    for ef in &file.edges {
        let from = lookup(ef.from)?;
        let to = lookup(ef.to)?;
        let weight = match (ef.k, ef.x) {
            (Some(k), _) => k,
            (None, Some(x)) => {
                derive_edge_weights(&[(from, to, x)], &nominal)?[0].weight
            }
            (None, None) => return Err(GridError::MissingEdgeParam { from: ef.from, to: ef.to }),
        };
        edges.push(Edge { from, to, weight });
    }

    let mut boundary = Vec::with_capacity(file.boundary.len());
    for id in &file.boundary {
        boundary.push(lookup(*id)?);
    }
    let base = file.base_mva.unwrap_or_else(|| F::of(100.0));
    NetworkModel::new(file.nodes.into_iter().map(into_params).collect(), edges, boundary, base)
}

fn into_params<F: Real>(nf: NodeFile<F>) -> NodeParams<F> {
    NodeParams {
        id: nf.id,
        is_generator: nf.is_generator,
        inertia: nf.m,
        damping: nf.d,
        governor_rate: nf.t,
        droop: nf.r,
        load: nf.load,
    }
}

pub fn load_network<F: Real>(path: impl AsRef<Path>) -> Result<NetworkModel<F>, GridError> {
    let text = fs::read_to_string(path)?;
    parse_network_str(&text)
}

/// Serialize a network to the JSON schema, writing derived weights directly.
pub fn network_to_json<F: Real>(model: &NetworkModel<F>) -> String {
    let nodes: Vec<NodeFile<F>> = model
        .nodes
        .iter()
        .map(|p| NodeFile {
            id: p.id,
            is_generator: p.is_generator,
            m: p.inertia,
            d: p.damping,
            t: p.governor_rate,
            r: p.droop,
            load: p.load,
        })
        .collect();
    let edges: Vec<EdgeFile<F>> = model
        .edges
        .iter()
        .map(|e| EdgeFile {
            from: model.nodes[e.from].id,
            to: model.nodes[e.to].id,
            x: None,
            k: Some(e.weight),
        })
        .collect();
    let file = NetworkFile {
        base_mva: Some(model.base_mva),
        nodes,
        edges,
        nominal: None,
        boundary: model.boundary_ids(),
    };
    serde_json::to_string_pretty(&file).expect("schema serializes")
}

pub fn save_network<F: Real>(model: &NetworkModel<F>, path: impl AsRef<Path>) -> Result<(), GridError> {
    fs::write(path, network_to_json(model))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;

    fn star_edges() -> Vec<Edge<f64>> {
        vec![
            Edge { from: 0, to: 4, weight: 4.0 },
            Edge { from: 1, to: 4, weight: 10.0 },
            Edge { from: 2, to: 4, weight: 16.0 },
            Edge { from: 3, to: 4, weight: 10.0 },
        ]
    }

    #[test]
    fn star_laplacian_matches_hand_values() {
        let k = build_laplacian(&star_edges(), 5).unwrap();
        let m = k.matrix();
        assert_eq!(m[(4, 4)], -40.0);
        assert_eq!(m[(0, 4)], 4.0);
        assert_eq!(m[(4, 0)], 4.0);
        assert_eq!(m[(0, 0)], -4.0);
        assert_eq!(m[(0, 1)], 0.0);
    }

    #[test]
    fn empty_edge_list_gives_zero_matrix() {
        let k = build_laplacian::<f64>(&[], 3).unwrap();
        assert!(k.matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_laplacian_row_sums_and_symmetry() {
        // 6-node weighted graph; oracle is direct summation over the edge list.
        let edges = vec![
            Edge { from: 0, to: 1, weight: 2.5 },
            Edge { from: 0, to: 2, weight: 1.25 },
            Edge { from: 1, to: 3, weight: 7.0 },
            Edge { from: 2, to: 3, weight: 0.5 },
            Edge { from: 3, to: 4, weight: 3.5 },
            Edge { from: 4, to: 5, weight: 9.0 },
            Edge { from: 1, to: 5, weight: 4.25 },
        ];
        let k = build_laplacian(&edges, 6).unwrap();
        let m = k.matrix();
        for i in 0..6 {
            let direct: f64 = edges
                .iter()
                .filter(|e| e.from == i || e.to == i)
                .map(|e| e.weight)
                .sum();
            assert_eq!(m[(i, i)], -direct);
            let row_sum: f64 = m.row(i).iter().sum();
            assert!(row_sum.abs() <= 1e-12);
        }
        assert_eq!(m, &m.transpose());
    }

    #[test]
    fn laplacian_rejects_bad_edges() {
        let dup = vec![
            Edge { from: 0, to: 1, weight: 1.0 },
            Edge { from: 1, to: 0, weight: 2.0 },
        ];
        assert!(matches!(
            build_laplacian(&dup, 2),
            Err(GridError::DuplicateEdge { .. })
        ));
        assert!(matches!(
            build_laplacian(&[Edge { from: 1, to: 1, weight: 1.0 }], 2),
            Err(GridError::SelfLoop { node: 1 })
        ));
        assert!(matches!(
            build_laplacian(&[Edge { from: 0, to: 1, weight: 0.0 }], 2),
            Err(GridError::NonPositiveWeight { .. })
        ));
        assert!(matches!(
            build_laplacian(&[Edge { from: 0, to: 5, weight: 1.0 }], 2),
            Err(GridError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn derived_weights_flat_and_angled() {
        let flat = NominalPoint::flat(2);
        let e = derive_edge_weights(&[(0, 1, 0.25)], &flat).unwrap();
        assert_eq!(e[0].weight, 4.0);

        let nominal = NominalPoint {
            voltages: vec![1.0, 1.0],
            angles: vec![std::f64::consts::FRAC_PI_3, 0.0],
        };
        let e = derive_edge_weights(&[(0, 1, 0.5)], &nominal).unwrap();
        assert!((e[0].weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derived_weights_reject_bad_inputs() {
        let flat = NominalPoint::flat(2);
        assert!(matches!(
            derive_edge_weights(&[(0, 1, 0.0)], &flat),
            Err(GridError::NonPositiveReactance { .. })
        ));
        let wide = NominalPoint { voltages: vec![1.0, 1.0], angles: vec![1.6, 0.0] };
        assert!(matches!(
            derive_edge_weights(&[(0, 1, 0.5)], &wide),
            Err(GridError::AngleSpreadTooLarge { .. })
        ));
    }

    #[test]
    fn incidence_single_edge_and_star_identity() {
        let c = incidence_matrix(&[Edge { from: 0, to: 1, weight: 3.0 }], 2).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 0)], -1.0);

        // C diag(k) C^T == -K, elementwise.
        let edges = star_edges();
        let c = incidence_matrix(&edges, 5).unwrap();
        let k = build_laplacian(&edges, 5).unwrap();
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(
            edges.len(),
            edges.iter().map(|e| e.weight),
        ));
        let rebuilt = &c * diag * c.transpose();
        let diff = rebuilt + k.matrix();
        assert!(diff.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn incidence_complete_graph_columns_sum_to_zero() {
        let mut edges = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                edges.push(Edge { from: i, to: j, weight: 1.0 });
            }
        }
        let c = incidence_matrix(&edges, 4).unwrap();
        assert_eq!(c.ncols(), 6);
        for e in 0..6 {
            let s: f64 = c.column(e).iter().sum();
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn bundled_ieee30_loads_and_counts() {
        let net: NetworkModel<f64> = datasets::ieee30();
        assert_eq!(net.n_nodes(), 30);
        // 37 transmission lines plus the 4 transformer branches that tie the
        // two voltage levels together; without them the graph splits.
        assert_eq!(net.edges.len(), 41);
        assert_eq!(net.nodes.iter().filter(|p| p.is_generator).count(), 6);
        assert_eq!(net.boundary.len(), 6);
        assert!((net.total_load() - 2.834).abs() <= 1e-12);
        assert_eq!(net.boundary_ids(), vec![1, 2, 5, 8, 11, 13]);
        assert_eq!(net.nodes.iter().filter(|p| p.load > 0.0).count(), 21);
    }

    #[test]
    fn bundled_star5_matches_figure() {
        let net: NetworkModel<f64> = datasets::star5();
        assert_eq!(net.n_nodes(), 5);
        let weights: Vec<f64> = net.edges.iter().map(|e| e.weight).collect();
        assert_eq!(weights, vec![4.0, 10.0, 16.0, 10.0]);
        assert_eq!(net.interior_ids(), vec![5]);
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let net: NetworkModel<f64> = datasets::star5();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&net, &path).unwrap();
        let back: NetworkModel<f64> = load_network(&path).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn generator_in_interior_is_rejected() {
        let text = r#"{
            "nodes": [
                {"id": 1, "is_generator": true, "m": 1.0, "d": 1.0, "t": 1.0, "r": 0.0, "load": 0.0},
                {"id": 2, "is_generator": true, "m": 1.0, "d": 0.0, "t": 1.0, "r": 0.0, "load": 0.0}
            ],
            "edges": [{"from": 1, "to": 2, "k": 1.0}],
            "boundary": [1]
        }"#;
        assert!(matches!(
            parse_network_str::<f64>(text),
            Err(GridError::GeneratorNotBoundary { id: 2 })
        ));
    }

    #[test]
    fn disconnected_network_is_rejected_with_component() {
        let nodes = vec![
            NodeParams::generator(1, 1.0, 1.0, 1.0, 0.0, 0.0),
            NodeParams::passive(2, 0.0, 0.0),
            NodeParams::passive(3, 0.0, 0.0),
        ];
        let edges = vec![Edge { from: 0, to: 1, weight: 1.0 }];
        let err = NetworkModel::new(nodes, edges, vec![0], 100.0).unwrap_err();
        match err {
            GridError::Disconnected { component, .. } => assert_eq!(component, vec![3]),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn conventions_invert_t_and_r() {
        let net: NetworkModel<f64> = datasets::star5();
        let conv = Conventions { droop_is_inverse: true, governor_is_time_constant: true };
        let eff = net.apply_conventions(conv);
        let (_, _, t, r) = eff.boundary_params();
        assert!((t[0] - 20.0).abs() < 1e-12);
        assert!((r[0] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn generic_scalar_f32_parses_bundled_data() {
        let net: NetworkModel<f32> = datasets::star5();
        assert_eq!(net.edges[2].weight, 16.0f32);
    }
}
