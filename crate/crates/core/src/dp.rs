//! Vector-Laplace mechanism, the two-step private release of the reduced
//! dynamics model, bound projection, and a privacy accountant.
//!
//! A release perturbs the boundary inertia and damping vectors and the
//! full-network edge weights with zero-mean Laplace noise at scale
//! `alpha / (epsilon * split)`, projects onto the physical parameter boxes,
//! and Kron-reduces the perturbed network. Projection and reduction are
//! data-independent post-processing and consume no budget; the accountant
//! tracks exactly `epsilon` across the three noisy sub-releases.
//!
//! `epsilon = infinity` is a debugging sentinel: noise scale zero, release
//! logged as non-private.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::NetworkModel;
use crate::kron::{reduce_network, KronError, ReducedModel};
use crate::scalar::{clamp, Real};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("adjacency alpha_{class} must be positive and finite, got {value}")]
    BadAdjacency { class: &'static str, value: f64 },
    #[error("budget split must be positive and sum to 1, got sum {sum}")]
    BadSplit { sum: f64 },
    #[error("bounds for {class} must satisfy 0 < lower < upper")]
    BadBounds { class: &'static str },
    #[error("source {class}[{index}] = {value} lies outside its release bounds")]
    SourceOutOfBounds { class: &'static str, index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("vectors are not adjacent: they differ in {differing} coordinates")]
    NotAdjacent { differing: usize },
    #[error(transparent)]
    Kron(#[from] KronError),
}

/// Closed parameter interval used for release projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<F> {
    pub lo: F,
    pub hi: F,
}

impl<F: Real> Interval<F> {
    pub fn new(lo: F, hi: F) -> Self {
        Self { lo, hi }
    }

    pub fn project(&self, x: F) -> F {
        clamp(x, self.lo, self.hi)
    }

    pub fn contains(&self, x: F) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn validate(&self, class: &'static str) -> Result<(), DpError> {
        if !(F::zero() < self.lo && self.lo < self.hi) {
            return Err(DpError::BadBounds { class });
        }
        Ok(())
    }
}

/// Box bounds per parameter class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds<F> {
    pub k: Interval<F>,
    pub m: Interval<F>,
    pub d: Interval<F>,
}

impl<F: Real> Default for Bounds<F> {
    /// k in [1, 100], m in [1, 40], d in [1, 40].
    fn default() -> Self {
        Self {
            k: Interval::new(F::one(), F::of(100.0)),
            m: Interval::new(F::one(), F::of(40.0)),
            d: Interval::new(F::one(), F::of(40.0)),
        }
    }
}

impl<F: Real> Bounds<F> {
    pub fn validate(&self) -> Result<(), DpError> {
        self.k.validate("k")?;
        self.m.validate("m")?;
        self.d.validate("d")
    }
}

/// Fractions of the total budget spent on (inertia, damping, network).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit<F> {
    pub m: F,
    pub d: F,
    pub k: F,
}

impl<F: Real> Default for BudgetSplit<F> {
    fn default() -> Self {
        let third = F::one() / F::of(3.0);
        Self { m: third, d: third, k: third }
    }
}

/// Total privacy loss, adjacency radii, and the per-class budget split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams<F> {
    pub epsilon: F,
    pub alpha_k: F,
    pub alpha_m: F,
    pub alpha_d: F,
    pub split: BudgetSplit<F>,
}

impl<F: Real> PrivacyParams<F> {
    /// Unit adjacencies and an even split.
    pub fn new(epsilon: F) -> Self {
        Self {
            epsilon,
            alpha_k: F::one(),
            alpha_m: F::one(),
            alpha_d: F::one(),
            split: BudgetSplit::default(),
        }
    }

    pub fn is_non_private(&self) -> bool {
        self.epsilon.lossy_f64().is_infinite()
    }

    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.epsilon > F::zero()) {
            return Err(DpError::NonPositiveEpsilon(self.epsilon.lossy_f64()));
        }
        for (class, a) in [("k", self.alpha_k), ("m", self.alpha_m), ("d", self.alpha_d)] {
            if !(a > F::zero()) || a.lossy_f64().is_infinite() {
                return Err(DpError::BadAdjacency { class, value: a.lossy_f64() });
            }
        }
        let s = self.split;
        let sum = s.m + s.d + s.k;
        if !(s.m > F::zero() && s.d > F::zero() && s.k > F::zero())
            || (sum - F::one()).abs() > F::of(1e-12)
        {
            return Err(DpError::BadSplit { sum: sum.lossy_f64() });
        }
        Ok(())
    }

    /// Per-class budgets. The network entry absorbs the split rounding so
    /// the three budgets sum to exactly `epsilon`.
    pub fn budgets(&self) -> (F, F, F) {
        if self.is_non_private() {
            let inf = F::of(f64::INFINITY);
            return (inf, inf, inf);
        }
        let eps_m = self.epsilon * self.split.m;
        let eps_d = self.epsilon * self.split.d;
        let eps_k = self.epsilon - eps_m - eps_d;
        (eps_m, eps_d, eps_k)
    }

    /// Laplace noise scales for (m, d, k); zero when non-private.
    pub fn scales(&self) -> (F, F, F) {
        let (eps_m, eps_d, eps_k) = self.budgets();
        if self.is_non_private() {
            return (F::zero(), F::zero(), F::zero());
        }
        (self.alpha_m / eps_m, self.alpha_d / eps_d, self.alpha_k / eps_k)
    }
}

// ---------------------------------------------------------------------------
// Accountant
// ---------------------------------------------------------------------------

fn ser_maybe_inf<F: Real, S: serde::Serializer>(v: &F, s: S) -> Result<S::Ok, S::Error> {
    if v.lossy_f64().is_infinite() {
        s.serialize_none()
    } else {
        v.serialize(s)
    }
}

fn de_maybe_inf<'de, F: Real, D: serde::Deserializer<'de>>(d: D) -> Result<F, D::Error> {
    Ok(Option::<F>::deserialize(d)?.unwrap_or_else(|| F::of(f64::INFINITY)))
}

/// One ledger row: what was released and how much budget it consumed.
/// `seq` is a logical timestamp (monotone within the accountant) so records
/// stay bit-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Real", deserialize = "F: Real"))]
pub struct AccountantEntry<F> {
    pub label: String,
    #[serde(serialize_with = "ser_maybe_inf", deserialize_with = "de_maybe_inf")]
    pub epsilon: F,
    pub adjacency: Option<F>,
    pub seq: u64,
}

/// Sequential-composition ledger. Noisy releases add their budget; data-
/// independent post-processing is recorded at zero cost.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Real", deserialize = "F: Real"))]
pub struct Accountant<F> {
    entries: Vec<AccountantEntry<F>>,
}

impl<F: Real> Accountant<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn record(&mut self, label: impl Into<String>, epsilon: F, adjacency: Option<F>) {
        let seq = self.entries.len() as u64;
        self.entries.push(AccountantEntry { label: label.into(), epsilon, adjacency, seq });
    }

    /// Record a data-independent post-processing step (consumes zero).
    pub fn record_post_processing(&mut self, label: impl Into<String>) {
        self.record(label, F::zero(), None);
    }

    pub fn entries(&self) -> &[AccountantEntry<F>] {
        &self.entries
    }

    /// Total privacy loss consumed so far.
    pub fn total(&self) -> F {
        self.entries.iter().fold(F::zero(), |acc, e| acc + e.epsilon)
    }

    pub fn from_entries(entries: Vec<AccountantEntry<F>>) -> Self {
        Self { entries }
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Labeled RNG sub-streams for one release. Streams are fixed per parameter
/// class, so adding classes later never shifts existing noise.
#[derive(Debug, Clone, Copy)]
pub struct ReleaseRng {
    root: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Inertia = 1,
    Damping = 2,
    Network = 3,
}

impl ReleaseRng {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn seed(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, label: Stream) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.root);
        rng.set_stream(label as u64);
        rng
    }
}

/// Draw `n` i.i.d. Laplace(0, scale) samples by inverse CDF:
/// `u ~ U(-1/2, 1/2)`, `x = -b sign(u) ln(1 - 2|u|)`. A zero scale yields
/// exact zeros without consuming randomness.
pub fn laplace_sample<F: Real, R: Rng + ?Sized>(scale: F, n: usize, rng: &mut R) -> DVector<F> {
    debug_assert!(scale >= F::zero());
    if scale == F::zero() {
        return DVector::zeros(n);
    }
    DVector::from_fn(n, |_, _| loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let t = 1.0 - 2.0 * u.abs();
        if t > 0.0 {
            return -scale * F::of(u.signum()) * F::of(t).ln();
        }
    })
}

fn check_in_bounds<F: Real>(
    class: &'static str,
    x: &DVector<F>,
    iv: &Interval<F>,
) -> Result<(), DpError> {
    for (index, v) in x.iter().enumerate() {
        if !iv.contains(*v) {
            return Err(DpError::SourceOutOfBounds { class, index, value: v.lossy_f64() });
        }
    }
    Ok(())
}

fn perturb_project<F: Real, R: Rng + ?Sized>(
    x: &DVector<F>,
    scale: F,
    iv: &Interval<F>,
    rng: &mut R,
) -> DVector<F> {
    let noise = laplace_sample(scale, x.len(), rng);
    DVector::from_fn(x.len(), |i, _| iv.project(x[i] + noise[i]))
}

/// Step-1 obfuscation of boundary inertia and damping.
pub fn obfuscate_inertia_damping<F: Real>(
    m: &DVector<F>,
    d: &DVector<F>,
    params: &PrivacyParams<F>,
    bounds: &Bounds<F>,
    rng: &ReleaseRng,
) -> Result<(DVector<F>, DVector<F>), DpError> {
    params.validate()?;
    bounds.validate()?;
    if m.len() != d.len() {
        return Err(DpError::DimMismatch { expected: m.len(), got: d.len() });
    }
    check_in_bounds("m", m, &bounds.m)?;
    check_in_bounds("d", d, &bounds.d)?;
    let (scale_m, scale_d, _) = params.scales();
    let m_tilde = perturb_project(m, scale_m, &bounds.m, &mut rng.stream(Stream::Inertia));
    let d_tilde = perturb_project(d, scale_d, &bounds.d, &mut rng.stream(Stream::Damping));
    Ok((m_tilde, d_tilde))
}

/// Step-2 obfuscation of the full-network edge weights. The box projection
/// (lower bound >= 1 by default) subsumes the strict-positivity requirement
/// for Kron reduction.
pub fn obfuscate_network<F: Real>(
    k: &DVector<F>,
    params: &PrivacyParams<F>,
    bounds: &Bounds<F>,
    rng: &ReleaseRng,
) -> Result<DVector<F>, DpError> {
    params.validate()?;
    bounds.validate()?;
    check_in_bounds("k", k, &bounds.k)?;
    let (_, _, scale_k) = params.scales();
    Ok(perturb_project(k, scale_k, &bounds.k, &mut rng.stream(Stream::Network)))
}

/// A released synthetic model: the Kron-reduced obfuscated system plus the
/// ledger that certifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscatedModel<F> {
    /// Reduced system built from the perturbed network, carrying the
    /// perturbed inertia/damping and the public t, r vectors. `k_red` is the
    /// canonical `-C_r diag(k_r) C_r^T` of its reduced edge weights.
    pub reduced: ReducedModel<F>,
    /// Perturbed (projected) weights over the original edge list.
    pub noisy_edge_weights: DVector<F>,
    pub params: PrivacyParams<F>,
    pub bounds: Bounds<F>,
    pub seed: u64,
    pub accountant: Accountant<F>,
}

/// Run the full two-step release: perturb (m, d, k), rebuild and Kron-reduce
/// the perturbed Laplacian, and account for the spent budget.
pub fn dp_release<F: Real>(
    net: &NetworkModel<F>,
    params: &PrivacyParams<F>,
    bounds: &Bounds<F>,
    seed: u64,
) -> Result<ObfuscatedModel<F>, DpError> {
    params.validate()?;
    bounds.validate()?;
    let rng = ReleaseRng::new(seed);
    let (m, d, _, _) = net.boundary_params();
    let k = net.edge_weights();

    let (m_tilde, d_tilde) = obfuscate_inertia_damping(&m, &d, params, bounds, &rng)?;
    let k_tilde = obfuscate_network(&k, params, bounds, &rng)?;

    let noisy_net = net.with_edge_weights(&k_tilde);
    let base = reduce_network(&noisy_net)?;
    let reduced = base.with_parameters(base.k_r.clone(), m_tilde, d_tilde);

    let (eps_m, eps_d, eps_k) = params.budgets();
    let tag = if params.is_non_private() { " (non-private)" } else { "" };
    let mut accountant = Accountant::new();
    accountant.record(format!("inertia{tag}"), eps_m, Some(params.alpha_m));
    accountant.record(format!("damping{tag}"), eps_d, Some(params.alpha_d));
    accountant.record(format!("network{tag}"), eps_k, Some(params.alpha_k));
    accountant.record_post_processing("bounds-projection");
    accountant.record_post_processing("kron-reduction");

    Ok(ObfuscatedModel {
        reduced,
        noisy_edge_weights: k_tilde,
        params: *params,
        bounds: *bounds,
        seed,
        accountant,
    })
}

/// Exact log-likelihood ratio `|log f(out - x) / f(out - x')|` of the vector
/// Laplace mechanism for two inputs differing in at most one coordinate.
pub fn laplace_log_density_ratio<F: Real>(
    x: &DVector<F>,
    x_prime: &DVector<F>,
    outcome: &DVector<F>,
    scale: F,
) -> Result<F, DpError> {
    if x.len() != x_prime.len() || x.len() != outcome.len() {
        return Err(DpError::DimMismatch { expected: x.len(), got: x_prime.len().max(outcome.len()) });
    }
    let differing = x.iter().zip(x_prime.iter()).filter(|(a, b)| a != b).count();
    if differing > 1 {
        return Err(DpError::NotAdjacent { differing });
    }
    let mut log_ratio = F::zero();
    for i in 0..x.len() {
        log_ratio += (outcome[i] - x_prime[i]).abs() - (outcome[i] - x[i]).abs();
    }
    Ok((log_ratio / scale).abs())
}

// ---------------------------------------------------------------------------
// Release manifest
// ---------------------------------------------------------------------------

/// Optimized parameter values carried by a post-processed manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Real", deserialize = "F: Real"))]
pub struct ThetaValues<F> {
    pub k_r: Vec<F>,
    pub m: Vec<F>,
    pub d: Vec<F>,
}

/// The unit of reproducibility: everything needed to rebuild a released
/// model and audit its privacy cost. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Real", deserialize = "F: Real"))]
pub struct ReleaseManifest<F> {
    pub seed: u64,
    #[serde(serialize_with = "ser_maybe_inf", deserialize_with = "de_maybe_inf")]
    pub epsilon: F,
    pub alpha_k: F,
    pub alpha_m: F,
    pub alpha_d: F,
    pub split: BudgetSplit<F>,
    pub bounds: Bounds<F>,
    /// External ids of boundary buses, in reduction order.
    pub boundary: Vec<usize>,
    /// External ids of interior buses, in K_ac column order.
    pub interior: Vec<usize>,
    /// Original edge list (external id pairs) for the noisy weights.
    pub edges: Vec<[usize; 2]>,
    pub noisy_edge_weights: Vec<F>,
    /// Laplace-only reduced parameters (Steps 1-2).
    pub k_r: Vec<F>,
    pub m: Vec<F>,
    pub d: Vec<F>,
    /// Public governor/droop diagonals.
    pub t: Vec<F>,
    pub r: Vec<F>,
    /// Accompanying matrix rows (boundary-major).
    pub k_ac: Vec<Vec<F>>,
    pub accountant: Vec<AccountantEntry<F>>,
    pub post_processed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_post: Option<ThetaValues<F>>,
}

impl<F: Real> ReleaseManifest<F> {
    pub fn from_release(obf: &ObfuscatedModel<F>, net: &NetworkModel<F>) -> Self {
        let red = &obf.reduced;
        let k_ac = (0..red.k_ac.nrows())
            .map(|i| red.k_ac.row(i).iter().copied().collect())
            .collect();
        Self {
            seed: obf.seed,
            epsilon: obf.params.epsilon,
            alpha_k: obf.params.alpha_k,
            alpha_m: obf.params.alpha_m,
            alpha_d: obf.params.alpha_d,
            split: obf.params.split,
            bounds: obf.bounds,
            boundary: red.boundary.clone(),
            interior: red.interior.clone(),
            edges: net
                .edges
                .iter()
                .map(|e| [net.nodes[e.from].id, net.nodes[e.to].id])
                .collect(),
            noisy_edge_weights: obf.noisy_edge_weights.iter().copied().collect(),
            k_r: red.k_r.iter().copied().collect(),
            m: red.m.iter().copied().collect(),
            d: red.d.iter().copied().collect(),
            t: red.t.iter().copied().collect(),
            r: red.r.iter().copied().collect(),
            k_ac,
            accountant: obf.accountant.entries().to_vec(),
            post_processed: false,
            theta_post: None,
        }
    }

    fn model_from(&self, k_r: &[F], m: &[F], d: &[F]) -> ReducedModel<F> {
        let g = self.boundary.len();
        let b = self.interior.len();
        let k_ac = nalgebra::DMatrix::from_fn(g, b, |i, j| self.k_ac[i][j]);
        let template = ReducedModel {
            boundary: self.boundary.clone(),
            interior: self.interior.clone(),
            k_red: nalgebra::DMatrix::zeros(g, g),
            k_ac,
            k_r: DVector::zeros(crate::kron::n_complete_edges(g)),
            m: DVector::zeros(g),
            d: DVector::zeros(g),
            t: DVector::from_row_slice(&self.t),
            r: DVector::from_row_slice(&self.r),
        };
        template.with_parameters(
            DVector::from_row_slice(k_r),
            DVector::from_row_slice(m),
            DVector::from_row_slice(d),
        )
    }

    /// The Laplace-only released model (Steps 1-2).
    pub fn laplace_model(&self) -> ReducedModel<F> {
        self.model_from(&self.k_r, &self.m, &self.d)
    }

    /// The post-processed model, when Step 3 has run.
    pub fn postprocessed_model(&self) -> Option<ReducedModel<F>> {
        let theta = self.theta_post.as_ref()?;
        Some(self.model_from(&theta.k_r, &theta.m, &theta.d))
    }

    /// Rebuild the release object (Steps 1-2 state) from the manifest.
    pub fn to_obfuscated(&self) -> ObfuscatedModel<F> {
        ObfuscatedModel {
            reduced: self.laplace_model(),
            noisy_edge_weights: DVector::from_row_slice(&self.noisy_edge_weights),
            params: PrivacyParams {
                epsilon: self.epsilon,
                alpha_k: self.alpha_k,
                alpha_m: self.alpha_m,
                alpha_d: self.alpha_d,
                split: self.split,
            },
            bounds: self.bounds,
            seed: self.seed,
            accountant: Accountant::from_entries(self.accountant.clone()),
        }
    }

    /// Embed the fitted parameters and the extended ledger.
    pub fn with_post_processing(mut self, theta: ThetaValues<F>, accountant: &Accountant<F>) -> Self {
        self.theta_post = Some(theta);
        self.accountant = accountant.entries().to_vec();
        self.post_processed = true;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
