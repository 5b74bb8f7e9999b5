//! Reverse-engineering audit: recover original network weights from a
//! Kron-reduced network, analytically for star topologies and by damped
//! Gauss-Newton residual minimization in general.
//!
//! The residual of a candidate weight vector is the elementwise defect of
//! the reduction identity: Kron-reduce the candidate network and compare
//! its reduced off-diagonals (optionally also the diagonal rows) against
//! the target. Recovery over topologies with more than one interior node
//! goes through the same residual interface but carries no convergence
//! guarantee and should be treated as experimental.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::grid::{build_laplacian, Edge};
use crate::kron::{complete_edges, kron_reduce, n_complete_edges, KronError};
use crate::scalar::{fmax, Real};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("candidate weight {index} is not positive")]
    NonPositiveCandidate { index: usize },
    #[error("reduced weight {index} is not positive; not star-reducible")]
    NotStarReducible { index: usize },
    #[error("reduced weight vector of length {len} is not a complete graph")]
    NotCompleteGraph { len: usize },
    #[error("under-determined problem ({equations} equations, {unknowns} unknowns); measurements would be needed")]
    UnderDetermined { equations: usize, unknowns: usize },
    #[error("non-identifiable: residual Jacobian has rank {rank} < {unknowns} unknowns")]
    NonIdentifiable { rank: usize, unknowns: usize },
    #[error("candidate dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Kron(#[from] KronError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Equation-count taxonomy of the recovery system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Determinacy {
    OverDetermined,
    WellDetermined,
    UnderDetermined,
}

/// A recovery instance: the released reduced weights plus the assumed
/// original topology.
#[derive(Debug, Clone)]
pub struct RecoveryProblem<F> {
    /// Node count of the assumed original network.
    pub n_nodes: usize,
    /// Boundary node positions (reduction order).
    pub boundary: Vec<usize>,
    /// Interior node positions.
    pub interior: Vec<usize>,
    /// Assumed original edge list (positions, i != j).
    pub edges: Vec<(usize, usize)>,
    /// Target reduced weights over the complete boundary graph.
    pub k_red: DVector<F>,
    /// Also enforce the diagonal rows of the reduction identity.
    pub include_diagonal: bool,
}

impl<F: Real> RecoveryProblem<F> {
    /// Star assumption: `g` boundary nodes all attached to one interior hub.
    pub fn star(k_red: DVector<F>) -> Result<Self, AttackError> {
        let g = boundary_count(k_red.len())?;
        Ok(Self {
            n_nodes: g + 1,
            boundary: (0..g).collect(),
            interior: vec![g],
            edges: (0..g).map(|i| (i, g)).collect(),
            k_red,
            include_diagonal: false,
        })
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary.len()
    }

    pub fn n_equations(&self) -> usize {
        n_complete_edges(self.n_boundary()) + if self.include_diagonal { self.n_boundary() } else { 0 }
    }

    pub fn determinacy(&self) -> Determinacy {
        let eq = self.n_equations();
        let un = self.edges.len();
        if eq > un {
            Determinacy::OverDetermined
        } else if eq == un {
            Determinacy::WellDetermined
        } else {
            Determinacy::UnderDetermined
        }
    }
}

/// Outcome of a recovery attempt.
#[derive(Debug, Clone)]
pub struct RecoveryReport<F> {
    pub k_hat: DVector<F>,
    pub residual_norm: F,
    /// Relative error against the true weights, when those are available.
    pub rel_error: Option<F>,
    pub iters: usize,
    pub determinacy: Determinacy,
}

impl<F: Real> RecoveryReport<F> {
    pub fn with_truth(mut self, truth: &DVector<F>) -> Self {
        let diff = (&self.k_hat - truth).norm();
        self.rel_error = Some(diff / truth.norm());
        self
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct ReportFile<'a, F> {
            k_hat: Vec<F>,
            residual_norm: F,
            rel_error: Option<F>,
            iters: usize,
            determinacy: &'a Determinacy,
        }
        serde_json::to_string_pretty(&ReportFile {
            k_hat: self.k_hat.iter().copied().collect(),
            residual_norm: self.residual_norm,
            rel_error: self.rel_error,
            iters: self.iters,
            determinacy: &self.determinacy,
        })
        .expect("report serializes")
    }
}

/// Elementwise residuals of the reduction identity for a candidate weight
/// vector on the assumed topology: reduced off-diagonals minus the target,
/// plus diagonal consistency rows when enabled.
pub fn recovery_residuals<F: Real>(
    problem: &RecoveryProblem<F>,
    candidate: &DVector<F>,
) -> Result<DVector<F>, AttackError> {
    if candidate.len() != problem.edges.len() {
        return Err(AttackError::DimMismatch {
            expected: problem.edges.len(),
            got: candidate.len(),
        });
    }
    for (index, w) in candidate.iter().enumerate() {
        if !(*w > F::zero()) {
            return Err(AttackError::NonPositiveCandidate { index });
        }
    }
    let edges: Vec<Edge<F>> = problem
        .edges
        .iter()
        .zip(candidate.iter())
        .map(|(&(from, to), &weight)| Edge { from, to, weight })
        .collect();
    let lap = build_laplacian(&edges, problem.n_nodes)?;
    let (reduced, _) = kron_reduce(&lap, &problem.boundary, &problem.interior)?;

    let g = problem.n_boundary();
    let pairs = complete_edges(g);
    let mut res = DVector::zeros(problem.n_equations());
    for (e, &(i, j)) in pairs.iter().enumerate() {
        res[e] = reduced[(i, j)] - problem.k_red[e];
    }
    if problem.include_diagonal {
        let target = crate::kron::laplacian_from_weights(&problem.k_red, g);
        for i in 0..g {
            res[pairs.len() + i] = reduced[(i, i)] - target[(i, i)];
        }
    }
    Ok(res)
}

fn boundary_count(n_edges: usize) -> Result<usize, AttackError> {
    let g = (1.0 + (1.0 + 8.0 * n_edges as f64).sqrt()) / 2.0;
    let g_round = g.round() as usize;
    if n_complete_edges(g_round) != n_edges || g_round < 3 {
        return Err(AttackError::NotCompleteGraph { len: n_edges });
    }
    Ok(g_round)
}

/// Analytic recovery of star weights from the reduced complete graph:
/// `y_i = sqrt(k'_ij k'_in / k'_jn)`, `k_i = y_i sum(y)`. Exact whenever the
/// reduced weights were generated by a star.
pub fn recover_star<F: Real>(k_red: &DVector<F>) -> Result<DVector<F>, AttackError> {
    let g = boundary_count(k_red.len())?;
    for (index, w) in k_red.iter().enumerate() {
        if !(*w > F::zero()) {
            return Err(AttackError::NotStarReducible { index });
        }
    }
    let weight = |i: usize, j: usize| {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        k_red[crate::kron::edge_index(a, b, g)]
    };
    let mut y = DVector::zeros(g);
    for i in 0..g {
        // The two smallest other indices fix the (j, n) pair.
        let mut others = (0..g).filter(|&x| x != i);
        let j = others.next().expect("g >= 3");
        let n = others.next().expect("g >= 3");
        let radicand = weight(i, j) * weight(i, n) / weight(j, n);
        if !(radicand > F::zero()) {
            return Err(AttackError::NotStarReducible { index: i });
        }
        y[i] = radicand.sqrt();
    }
    let total = y.sum();
    Ok(y * total)
}

/// Damped Gauss-Newton on the recovery residuals: Levenberg shift starting
/// at 1e-3, x10 on rejected steps, forward-difference Jacobian, positivity
/// kept by projection to 1e-6. Stops below residual 1e-10 or at 200
/// iterations. Under-determined problems are rejected outright.
pub fn gauss_newton_recover<F: Real>(
    problem: &RecoveryProblem<F>,
    init: &DVector<F>,
) -> Result<RecoveryReport<F>, AttackError> {
    let determinacy = problem.determinacy();
    if determinacy == Determinacy::UnderDetermined {
        return Err(AttackError::UnderDetermined {
            equations: problem.n_equations(),
            unknowns: problem.edges.len(),
        });
    }
    let n = problem.edges.len();
    let floor = F::of(1e-6);
    let tol = F::of(1e-10);
    let mut k = init.map(|v| fmax(v, floor));
    let mut res = recovery_residuals(problem, &k)?;
    let mut res_norm = res.norm();

    let jacobian = |k: &DVector<F>, res: &DVector<F>| -> Result<DMatrix<F>, AttackError> {
        let mut jac = DMatrix::zeros(res.len(), n);
        for c in 0..n {
            let h = F::of(1e-7) * fmax(F::one(), k[c].abs());
            let mut probe = k.clone();
            probe[c] += h;
            let r_h = recovery_residuals(problem, &probe)?;
            for r in 0..res.len() {
                jac[(r, c)] = (r_h[r] - res[r]) / h;
            }
        }
        Ok(jac)
    };

    if res_norm < tol {
        return Ok(RecoveryReport { k_hat: k, residual_norm: res_norm, rel_error: None, iters: 0, determinacy });
    }

    let mut jac = jacobian(&k, &res)?;
    let rank = jac.clone().svd(false, false).rank(F::of(1e-10));
    if rank < n {
        return Err(AttackError::NonIdentifiable { rank, unknowns: n });
    }

    let mut mu = F::of(1e-3);
    let mut iters = 0usize;
    while iters < 200 && res_norm >= tol {
        iters += 1;
        let jt = jac.transpose();
        let mut normal = &jt * &jac;
        let rhs = -(&jt * &res);
        for i in 0..n {
            normal[(i, i)] += mu;
        }
        let step = match normal.lu().solve(&rhs) {
            Some(s) => s,
            None => {
                mu *= F::of(10.0);
                continue;
            }
        };
        let candidate = DVector::from_fn(n, |i, _| fmax(k[i] + step[i], floor));
        let cand_res = recovery_residuals(problem, &candidate)?;
        let cand_norm = cand_res.norm();
        if cand_norm < res_norm {
            k = candidate;
            res = cand_res;
            res_norm = cand_norm;
            mu = fmax(mu / F::of(10.0), F::of(1e-12));
            if res_norm >= tol {
                jac = jacobian(&k, &res)?;
            }
        } else {
            mu *= F::of(10.0);
            if mu > F::of(1e12) {
                break;
            }
        }
    }

    Ok(RecoveryReport { k_hat: k, residual_norm: res_norm, rel_error: None, iters, determinacy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{dp_release, Bounds, PrivacyParams};
    use crate::kron::reduce_network;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn fig1_reduced() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 1.6, 1.0, 4.0, 2.5, 4.0])
    }

    fn fig1_truth() -> DVector<f64> {
        DVector::from_vec(vec![4.0, 10.0, 16.0, 10.0])
    }

    #[test]
    fn residuals_vanish_at_truth_and_detect_scaling() {
        let problem = RecoveryProblem::star(fig1_reduced()).unwrap();
        let res = recovery_residuals(&problem, &fig1_truth()).unwrap();
        assert!(res.norm() <= 1e-12, "residual {:?}", res);

        let res2 = recovery_residuals(&problem, &(fig1_truth() * 2.0)).unwrap();
        assert!(res2.norm() > 0.1);
    }

    #[test]
    fn residuals_match_direct_reduction() {
        let problem = RecoveryProblem::star(fig1_reduced()).unwrap();
        let candidate = DVector::from_vec(vec![3.0, 12.0, 9.0, 5.5]);
        let res = recovery_residuals(&problem, &candidate).unwrap();
        // Oracle: reduce the candidate star directly.
        let edges: Vec<Edge<f64>> =
            (0..4).map(|i| Edge { from: i, to: 4, weight: candidate[i] }).collect();
        let lap = build_laplacian(&edges, 5).unwrap();
        let (red, _) = kron_reduce(&lap, &[0, 1, 2, 3], &[4]).unwrap();
        for (e, &(i, j)) in complete_edges(4).iter().enumerate() {
            assert_abs_diff_eq!(res[e], red[(i, j)] - fig1_reduced()[e], epsilon = 1e-12);
        }
    }

    #[test]
    fn star_recovery_reproduces_figure_values() {
        let k_hat = recover_star(&fig1_reduced()).unwrap();
        let sqrt10 = 10.0f64.sqrt();
        // Intermediate y values from the closed form.
        let y0 = (1.0 * 1.6 / 4.0f64).sqrt();
        assert_abs_diff_eq!(y0, sqrt10 / 5.0, epsilon = 1e-12);
        let truth = fig1_truth();
        for i in 0..4 {
            assert_abs_diff_eq!(k_hat[i], truth[i], epsilon = 1e-9 * truth[i]);
        }
    }

    #[test]
    fn uniform_star_recovers_by_symmetry() {
        let c = 8.0;
        let reduced = DVector::from_element(6, c / 4.0);
        let k_hat = recover_star(&reduced).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(k_hat[i], c, epsilon = 1e-12);
        }
    }

    #[test]
    fn nonpositive_reduced_weight_is_not_star_reducible() {
        let mut reduced = fig1_reduced();
        reduced[3] = 0.0;
        assert!(matches!(
            recover_star(&reduced),
            Err(AttackError::NotStarReducible { index: 3 })
        ));
    }

    #[test]
    fn gauss_newton_from_ones_matches_analytic() {
        let problem = RecoveryProblem::star(fig1_reduced()).unwrap();
        assert_eq!(problem.determinacy(), Determinacy::OverDetermined);
        let init = DVector::from_element(4, 1.0);
        let report = gauss_newton_recover(&problem, &init).unwrap().with_truth(&fig1_truth());
        assert!(report.residual_norm < 1e-10);
        assert!(report.rel_error.unwrap() <= 1e-6, "rel error {:?}", report.rel_error);
        assert!(report.iters > 0);
    }

    #[test]
    fn gauss_newton_at_truth_takes_no_iterations() {
        let problem = RecoveryProblem::star(fig1_reduced()).unwrap();
        let report = gauss_newton_recover(&problem, &fig1_truth()).unwrap();
        assert_eq!(report.iters, 0);
        assert!(report.residual_norm < 1e-10);
    }

    #[test]
    fn wye_delta_case_is_well_determined_and_exact() {
        // Star on 3 boundary nodes: the classic Y-Delta transformation.
        let truth = DVector::from_vec(vec![3.0, 7.0, 11.0]);
        let s: f64 = truth.sum();
        let reduced = DVector::from_vec(vec![
            truth[0] * truth[1] / s,
            truth[0] * truth[2] / s,
            truth[1] * truth[2] / s,
        ]);
        let problem = RecoveryProblem::star(reduced.clone()).unwrap();
        assert_eq!(problem.determinacy(), Determinacy::WellDetermined);

        // Analytic oracle: Y from Delta.
        let p = reduced[0] * reduced[1] + reduced[0] * reduced[2] + reduced[1] * reduced[2];
        let oracle = DVector::from_vec(vec![p / reduced[2], p / reduced[1], p / reduced[0]]);
        for i in 0..3 {
            assert_abs_diff_eq!(oracle[i], truth[i], epsilon = 1e-12);
        }

        let report = gauss_newton_recover(&problem, &DVector::from_element(3, 1.0))
            .unwrap()
            .with_truth(&truth);
        assert!(report.rel_error.unwrap() <= 1e-8);
    }

    #[test]
    fn under_determined_topologies_are_rejected() {
        // 3 reduced edges but 4 assumed unknowns: two interior hubs.
        let problem = RecoveryProblem {
            n_nodes: 5,
            boundary: vec![0, 1, 2],
            interior: vec![3, 4],
            edges: vec![(0, 3), (1, 3), (3, 4), (2, 4)],
            k_red: DVector::from_element(3, 1.0),
            include_diagonal: false,
        };
        assert!(matches!(
            gauss_newton_recover(&problem, &DVector::from_element(4, 1.0)),
            Err(AttackError::UnderDetermined { equations: 3, unknowns: 4 })
        ));
    }

    #[test]
    fn random_star_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..50 {
            let g = rng.random_range(3..7usize);
            let truth = DVector::from_fn(g, |_, _| rng.random_range(1.0..100.0f64));
            let edges: Vec<Edge<f64>> =
                (0..g).map(|i| Edge { from: i, to: g, weight: truth[i] }).collect();
            let lap = build_laplacian(&edges, g + 1).unwrap();
            let gamma: Vec<usize> = (0..g).collect();
            let (red, _) = kron_reduce(&lap, &gamma, &[g]).unwrap();
            let k_red = crate::kron::reduced_edge_weights(&red).unwrap();
            let k_hat = recover_star(&k_red).unwrap();
            let rel = (&k_hat - &truth).norm() / truth.norm();
            assert!(rel <= 1e-9, "rel {rel}");
        }
    }

    #[test]
    fn gauss_newton_solves_realizable_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for trial in 0..50 {
            let g = rng.random_range(3..6usize);
            let truth = DVector::from_fn(g, |_, _| rng.random_range(1.0..60.0f64));
            let edges: Vec<Edge<f64>> =
                (0..g).map(|i| Edge { from: i, to: g, weight: truth[i] }).collect();
            let lap = build_laplacian(&edges, g + 1).unwrap();
            let gamma: Vec<usize> = (0..g).collect();
            let (red, _) = kron_reduce(&lap, &gamma, &[g]).unwrap();
            let k_red = crate::kron::reduced_edge_weights(&red).unwrap();
            let problem = RecoveryProblem::star(k_red).unwrap();
            let init = DVector::from_fn(g, |_, _| rng.random_range(0.5..20.0f64));
            let report = gauss_newton_recover(&problem, &init).unwrap();
            assert!(report.residual_norm < 1e-10, "trial {trial}: residual {}", report.residual_norm);
        }
    }

    #[test]
    fn dp_release_defeats_star_recovery() {
        let net = crate::datasets::star5::<f64>();
        let truth = fig1_truth();
        let exact = reduce_network(&net).unwrap();
        let base_err = {
            let k_hat = recover_star(&exact.k_r).unwrap();
            (&k_hat - &truth).norm() / truth.norm()
        };
        let mut errs = Vec::new();
        for seed in 0..30u64 {
            let obf = dp_release(&net, &PrivacyParams::new(0.5), &Bounds::default(), seed).unwrap();
            let k_hat = recover_star(&obf.reduced.k_r).unwrap();
            errs.push((&k_hat - &truth).norm() / truth.norm());
        }
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        assert!(median >= 10.0 * base_err.max(1e-12), "median {median}, base {base_err}");
        assert!(median > 1e-2);
    }
}
