//! Experiment orchestration: the end-to-end release pipeline, transient
//! suites, fidelity metrics, and reproducible (epsilon, seed) sweeps with
//! plot-ready CSV output.
//!
//! All randomness flows from one base seed: replica r releases with root
//! seed `base + r` (shared across epsilon levels so releases differ only
//! through the noise scale) and draws its transient suite with seed
//! `base + r + 1_000_000`. Replicas run in parallel; outputs are byte-
//! identical regardless of worker count.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjoint::{postprocess, LossSpec, LossTrace, OptConfig, Theta};
use crate::dp::{dp_release, Bounds, BudgetSplit, DpError, PrivacyParams, ReleaseManifest};
use crate::grid::{Conventions, GridError, NetworkModel};
use crate::kron::{reduce_network, KronError, ReducedModel};
use crate::sim::{simulate_reduced, trajectory_mismatch, LoadEvent, SimConfig, SimError};

pub type Real = f64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("bus {id} referenced by an event does not exist")]
    MissingBus { id: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kron(#[from] KronError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Opt(#[from] crate::adjoint::OptError),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("replica {replica} at epsilon {epsilon}: {source}")]
    Replica { epsilon: Real, replica: usize, source: Box<HarnessError> },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_network() -> String {
    "builtin:ieee30".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/sweep")
}

fn default_epsilons() -> Vec<Real> {
    vec![0.5, 1.0, 2.0]
}

fn default_replicas() -> usize {
    100
}

fn default_alpha() -> Real {
    1.0
}

fn default_rho() -> Real {
    1e-4
}

fn default_sim() -> SimConfig<Real> {
    SimConfig { dt: 0.01, horizon: 30.0 }
}

/// Training disturbance: either a uniform fractional increase of every
/// bus's nominal load, or explicit per-bus deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSpec {
    #[serde(default)]
    pub time: Real,
    #[serde(default = "default_training_scale")]
    pub uniform_scale: Real,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<BTreeMap<usize, Real>>,
}

fn default_training_scale() -> Real {
    0.2
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self { time: 0.0, uniform_scale: 0.2, deltas: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransientMode {
    Random,
    Preset,
}

/// Test-transient generator settings. Random mode draws 1-3 buses and
/// per-bus load deltas uniform in [-0.3, 0.5]; preset mode emits the five
/// fixed transients over buses (all, {3,4}, {5,20}, {10,30}, {1}).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransientSpec {
    #[serde(default = "default_mode")]
    pub mode: TransientMode,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_event_time")]
    pub time: Real,
    #[serde(default = "default_min_buses")]
    pub min_buses: usize,
    #[serde(default = "default_max_buses")]
    pub max_buses: usize,
    #[serde(default = "default_delta_lo")]
    pub delta_lo: Real,
    #[serde(default = "default_delta_hi")]
    pub delta_hi: Real,
}

fn default_mode() -> TransientMode {
    TransientMode::Random
}
fn default_count() -> usize {
    10
}
fn default_event_time() -> Real {
    10.0
}
fn default_min_buses() -> usize {
    1
}
fn default_max_buses() -> usize {
    3
}
fn default_delta_lo() -> Real {
    -0.3
}
fn default_delta_hi() -> Real {
    0.5
}

impl Default for TransientSpec {
    fn default() -> Self {
        Self {
            mode: TransientMode::Random,
            count: 10,
            time: 10.0,
            min_buses: 1,
            max_buses: 3,
            delta_lo: -0.3,
            delta_hi: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptSettings {
    #[serde(default = "default_eta")]
    pub eta: Real,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<Real>,
}

fn default_eta() -> Real {
    100.0
}
fn default_iters() -> usize {
    500
}

impl Default for OptSettings {
    fn default() -> Self {
        Self { eta: 100.0, max_iters: 500, tol: None }
    }
}

/// Full experiment description; every field has a JSON default and a CLI
/// flag of the same name. `GRIDVEIL_SEED` overrides `base_seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_network")]
    pub network: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<Real>,
    #[serde(default = "default_alpha")]
    pub alpha_k: Real,
    #[serde(default = "default_alpha")]
    pub alpha_m: Real,
    #[serde(default = "default_alpha")]
    pub alpha_d: Real,
    #[serde(default)]
    pub split: BudgetSplit<Real>,
    #[serde(default)]
    pub bounds: Bounds<Real>,
    #[serde(default = "default_sim")]
    pub sim: SimConfig<Real>,
    #[serde(default)]
    pub opt: OptSettings,
    #[serde(default = "default_rho")]
    pub rho: Real,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub transients: TransientSpec,
    /// Optional external reference trajectory CSV; when absent the true
    /// model is simulated under the training event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub conventions: Conventions,
    /// Worker threads for the sweep; 0 uses the default pool.
    #[serde(default)]
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// CI profile: 20 replicas, 150 iterations.
    pub fn quick(mut self) -> Self {
        self.replicas = 20;
        self.opt.max_iters = 150;
        self
    }

    /// Apply `GRIDVEIL_SEED` when set.
    pub fn apply_env_overrides(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var("GRIDVEIL_SEED") {
            self.base_seed = v
                .parse()
                .map_err(|e| HarnessError::Config(format!("GRIDVEIL_SEED: {e}")))?;
        }
        Ok(())
    }

    pub fn privacy_for(&self, epsilon: Real) -> PrivacyParams<Real> {
        PrivacyParams {
            epsilon,
            alpha_k: self.alpha_k,
            alpha_m: self.alpha_m,
            alpha_d: self.alpha_d,
            split: self.split,
        }
    }

    pub fn opt_config(&self) -> OptConfig<Real> {
        OptConfig {
            eta: self.opt.eta,
            max_iters: self.opt.max_iters,
            bounds: self.bounds,
            tol: self.opt.tol,
        }
    }

    /// Resolve `builtin:<name>` or a filesystem path and apply the
    /// configured conventions.
    pub fn load_network(&self) -> Result<NetworkModel<Real>, HarnessError> {
        let net = load_network_source(&self.network)?;
        Ok(net.apply_conventions(self.conventions))
    }

    pub fn release_seed(&self, replica: usize) -> u64 {
        self.base_seed.wrapping_add(replica as u64)
    }

    pub fn transient_seed(&self, replica: usize) -> u64 {
        self.base_seed.wrapping_add(replica as u64).wrapping_add(1_000_000)
    }
}

/// Resolve a network argument: `builtin:ieee30`, `builtin:star5`, or a path.
pub fn load_network_source(source: &str) -> Result<NetworkModel<Real>, HarnessError> {
    if let Some(name) = source.strip_prefix("builtin:") {
        let text = crate::datasets::builtin(name)
            .ok_or_else(|| HarnessError::Config(format!("unknown builtin network '{name}'")))?;
        return Ok(crate::grid::parse_network_str(text)?);
    }
    Ok(crate::grid::load_network(source)?)
}

// ---------------------------------------------------------------------------
// Events and transients
// ---------------------------------------------------------------------------

/// Build a load event from external (bus id, delta) pairs.
pub fn event_from_bus_deltas(
    net: &NetworkModel<Real>,
    time: Real,
    deltas: &[(usize, Real)],
) -> Result<LoadEvent<Real>, HarnessError> {
    let mut boundary = nalgebra::DVector::zeros(net.boundary.len());
    let mut interior = nalgebra::DVector::zeros(net.interior.len());
    for &(id, delta) in deltas {
        let idx = net.index_of(id).ok_or(HarnessError::MissingBus { id })?;
        if let Some(p) = net.boundary.iter().position(|&x| x == idx) {
            boundary[p] += delta;
        } else if let Some(p) = net.interior.iter().position(|&x| x == idx) {
            interior[p] += delta;
        }
    }
    Ok(LoadEvent { time, boundary, interior })
}

/// The training disturbance described by the spec.
pub fn training_events(
    net: &NetworkModel<Real>,
    spec: &TrainingSpec,
) -> Result<Vec<LoadEvent<Real>>, HarnessError> {
    let deltas: Vec<(usize, Real)> = match &spec.deltas {
        Some(map) => map.iter().map(|(&id, &d)| (id, d)).collect(),
        None => net.nodes.iter().map(|p| (p.id, spec.uniform_scale * p.load)).collect(),
    };
    Ok(vec![event_from_bus_deltas(net, spec.time, &deltas)?])
}

/// Generate the test-transient suite; each transient is one event list.
pub fn generate_transients(
    net: &NetworkModel<Real>,
    spec: &TransientSpec,
    seed: u64,
) -> Result<Vec<Vec<LoadEvent<Real>>>, HarnessError> {
    match spec.mode {
        TransientMode::Preset => preset_transients(net, spec.time),
        TransientMode::Random => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = net.n_nodes();
            let mut suite = Vec::with_capacity(spec.count);
            for _ in 0..spec.count {
                let n_buses = if spec.min_buses >= spec.max_buses {
                    spec.min_buses
                } else {
                    rng.random_range(spec.min_buses..=spec.max_buses)
                };
                let mut chosen: Vec<usize> = Vec::with_capacity(n_buses);
                while chosen.len() < n_buses.min(n) {
                    let pick = rng.random_range(0..n);
                    if !chosen.contains(&pick) {
                        chosen.push(pick);
                    }
                }
                let deltas: Vec<(usize, Real)> = chosen
                    .iter()
                    .map(|&idx| {
                        let d = if spec.delta_lo < spec.delta_hi {
                            rng.random_range(spec.delta_lo..spec.delta_hi)
                        } else {
                            spec.delta_lo
                        };
                        (net.nodes[idx].id, d)
                    })
                    .collect();
                suite.push(vec![event_from_bus_deltas(net, spec.time, &deltas)?]);
            }
            Ok(suite)
        }
    }
}

/// The five fixed out-of-sample transients: uniform 5% load increase;
/// +0.2 p.u. at buses 3 and 4; +0.2 p.u. at buses 5 and 20; full load loss
/// at buses 10 and 30; +0.5 p.u. at bus 1.
pub fn preset_transients(
    net: &NetworkModel<Real>,
    time: Real,
) -> Result<Vec<Vec<LoadEvent<Real>>>, HarnessError> {
    let load = |id: usize| -> Result<Real, HarnessError> {
        let idx = net.index_of(id).ok_or(HarnessError::MissingBus { id })?;
        Ok(net.nodes[idx].load)
    };
    let uniform: Vec<(usize, Real)> = net.nodes.iter().map(|p| (p.id, 0.05 * p.load)).collect();
    let specs: Vec<Vec<(usize, Real)>> = vec![
        uniform,
        vec![(3, 0.2), (4, 0.2)],
        vec![(5, 0.2), (20, 0.2)],
        vec![(10, -load(10)?), (30, -load(30)?)],
        vec![(1, 0.5)],
    ];
    specs
        .iter()
        .map(|d| Ok(vec![event_from_bus_deltas(net, time, d)?]))
        .collect()
}

// ---------------------------------------------------------------------------
// Fidelity metrics
// ---------------------------------------------------------------------------

/// Mean squared trajectory mismatch of one model over a transient suite.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityEntry {
    pub per_transient: Vec<Real>,
    pub mean: Real,
}

/// Average trajectory mismatch of `test` against `reference` over the suite.
pub fn evaluate_fidelity(
    reference: &ReducedModel<Real>,
    test: &ReducedModel<Real>,
    suite: &[Vec<LoadEvent<Real>>],
    sim: &SimConfig<Real>,
) -> Result<FidelityEntry, HarnessError> {
    let refs = reference_trajectories(reference, suite, sim)?;
    fidelity_against(test, suite, &refs, sim)
}

fn reference_trajectories(
    reference: &ReducedModel<Real>,
    suite: &[Vec<LoadEvent<Real>>],
    sim: &SimConfig<Real>,
) -> Result<Vec<nalgebra::DMatrix<Real>>, HarnessError> {
    suite
        .iter()
        .map(|events| Ok(simulate_reduced(reference, events, sim)?.omega))
        .collect()
}

fn fidelity_against(
    test: &ReducedModel<Real>,
    suite: &[Vec<LoadEvent<Real>>],
    refs: &[nalgebra::DMatrix<Real>],
    sim: &SimConfig<Real>,
) -> Result<FidelityEntry, HarnessError> {
    let mut per_transient = Vec::with_capacity(suite.len());
    for (events, reference) in suite.iter().zip(refs.iter()) {
        let omega = simulate_reduced(test, events, sim)?.omega;
        per_transient.push(trajectory_mismatch(&omega, reference, sim.dt));
    }
    let mean = per_transient.iter().sum::<Real>() / per_transient.len().max(1) as Real;
    Ok(FidelityEntry { per_transient, mean })
}

// ---------------------------------------------------------------------------
// Pipeline and sweep
// ---------------------------------------------------------------------------

/// Everything one (epsilon, replica) run produces.
#[derive(Debug, Clone)]
pub struct ReplicaOutcome {
    pub epsilon: Real,
    pub replica: usize,
    pub seed: u64,
    pub manifest: ReleaseManifest<Real>,
    pub trace: LossTrace<Real>,
    pub l_lap: FidelityEntry,
    pub l_pp: FidelityEntry,
}

/// Release, post-process, and evaluate one replica end to end.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    epsilon: Real,
    replica: usize,
) -> Result<ReplicaOutcome, HarnessError> {
    let wrap = |source: HarnessError| HarnessError::Replica {
        epsilon,
        replica,
        source: Box::new(source),
    };
    run_pipeline_inner(cfg, epsilon, replica).map_err(wrap)
}

fn run_pipeline_inner(
    cfg: &ExperimentConfig,
    epsilon: Real,
    replica: usize,
) -> Result<ReplicaOutcome, HarnessError> {
    let net = cfg.load_network()?;
    let truth = reduce_network(&net)?;
    let train = training_events(&net, &cfg.training)?;
    let omega_ref = match &cfg.reference {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let (_, omega, _) = crate::sim::read_trajectory_omega::<Real>(&text)
                .map_err(HarnessError::Config)?;
            omega
        }
        None => simulate_reduced(&truth, &train, &cfg.sim)?.omega,
    };

    let seed = cfg.release_seed(replica);
    let obf = dp_release(&net, &cfg.privacy_for(epsilon), &cfg.bounds, seed)?;
    let spec = LossSpec::for_release(&obf, omega_ref, train, cfg.sim, cfg.rho)?;
    let fitted = postprocess(&obf, &spec, &cfg.opt_config())?;

    let suite = generate_transients(&net, &cfg.transients, cfg.transient_seed(replica))?;
    let refs = reference_trajectories(&truth, &suite, &cfg.sim)?;
    let l_lap = fidelity_against(&obf.reduced, &suite, &refs, &cfg.sim)?;
    let pp_model = obf.reduced.with_parameters(
        fitted.theta.k_r.clone(),
        fitted.theta.m.clone(),
        fitted.theta.d.clone(),
    );
    let l_pp = fidelity_against(&pp_model, &suite, &refs, &cfg.sim)?;

    let manifest = ReleaseManifest::from_release(&obf, &net)
        .with_post_processing((&fitted.theta).into(), &fitted.accountant);
    Ok(ReplicaOutcome {
        epsilon,
        replica,
        seed,
        manifest,
        trace: fitted.trace,
        l_lap,
        l_pp,
    })
}

/// Per-epsilon aggregate statistics over replica means.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonSummary {
    pub epsilon: Real,
    pub mean_l_lap: Real,
    pub mean_l_pp: Real,
    pub p10_l_lap: Real,
    pub p90_l_lap: Real,
    pub p10_l_pp: Real,
    pub p90_l_pp: Real,
}

#[derive(Debug)]
pub struct SweepResult {
    pub outcomes: Vec<ReplicaOutcome>,
    pub summaries: Vec<EpsilonSummary>,
}

fn percentile(sorted: &[Real], q: Real) -> Real {
    if sorted.is_empty() {
        return Real::NAN;
    }
    let pos = (q * (sorted.len() - 1) as Real).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

fn summarize(epsilon: Real, outcomes: &[&ReplicaOutcome]) -> EpsilonSummary {
    let mut lap: Vec<Real> = outcomes.iter().map(|o| o.l_lap.mean).collect();
    let mut pp: Vec<Real> = outcomes.iter().map(|o| o.l_pp.mean).collect();
    let mean_l_lap = lap.iter().sum::<Real>() / lap.len().max(1) as Real;
    let mean_l_pp = pp.iter().sum::<Real>() / pp.len().max(1) as Real;
    lap.sort_by(Real::total_cmp);
    pp.sort_by(Real::total_cmp);
    EpsilonSummary {
        epsilon,
        mean_l_lap,
        mean_l_pp,
        p10_l_lap: percentile(&lap, 0.1),
        p90_l_lap: percentile(&lap, 0.9),
        p10_l_pp: percentile(&pp, 0.1),
        p90_l_pp: percentile(&pp, 0.9),
    }
}

/// Run the full sweep and write its output tables under `cfg.out_dir`.
///
/// Files: `metrics.csv` (epsilon, replica, transient, L_lap, L_pp),
/// `loss_trace_<eps>_<rep>.csv`, `params_<eps>.csv`, and
/// `manifest_<eps>_<rep>.json`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let jobs: Vec<(Real, usize)> = cfg
        .epsilons
        .iter()
        .flat_map(|&eps| (0..cfg.replicas).map(move |r| (eps, r)))
        .collect();

    let execute = || -> Result<Vec<ReplicaOutcome>, HarnessError> {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(eps, r)| run_pipeline(cfg, eps, r)).collect()
    };
    let outcomes = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .install(execute)?
    } else {
        execute()?
    };

    write_outputs(cfg, &outcomes)?;

    let summaries = cfg
        .epsilons
        .iter()
        .map(|&eps| {
            let group: Vec<&ReplicaOutcome> =
                outcomes.iter().filter(|o| o.epsilon == eps).collect();
            summarize(eps, &group)
        })
        .collect();
    Ok(SweepResult { outcomes, summaries })
}

fn write_outputs(cfg: &ExperimentConfig, outcomes: &[ReplicaOutcome]) -> Result<(), HarnessError> {
    let dir = &cfg.out_dir;
    let mut metrics = String::from("epsilon,replica,transient,L_lap,L_pp\n");
    for o in outcomes {
        for (t, (lap, pp)) in
            o.l_lap.per_transient.iter().zip(o.l_pp.per_transient.iter()).enumerate()
        {
            metrics.push_str(&format!("{},{},{},{lap},{pp}\n", o.epsilon, o.replica, t));
        }
        fs::write(
            dir.join(format!("manifest_{}_{}.json", o.epsilon, o.replica)),
            o.manifest.to_json(),
        )?;
        fs::write(
            dir.join(format!("loss_trace_{}_{}.csv", o.epsilon, o.replica)),
            o.trace.to_csv(),
        )?;
    }
    fs::write(dir.join("metrics.csv"), metrics)?;

    // Parameter distribution tables, one file per epsilon.
    let net = cfg.load_network()?;
    let truth = reduce_network(&net)?;
    let true_theta = Theta::from_model(&truth);
    for &eps in &cfg.epsilons {
        let mut table = String::from("class,index,true,laplace,postprocessed,replica\n");
        for o in outcomes.iter().filter(|o| o.epsilon == eps) {
            let post = o.manifest.theta_post.as_ref().expect("sweep post-processes");
            let classes: [(&str, &[Real], &Vec<Real>, &Vec<Real>); 3] = [
                ("k", true_theta.k_r.as_slice(), &o.manifest.k_r, &post.k_r),
                ("m", true_theta.m.as_slice(), &o.manifest.m, &post.m),
                ("d", true_theta.d.as_slice(), &o.manifest.d, &post.d),
            ];
            for (class, truth_vals, lap_vals, pp_vals) in classes {
                for i in 0..truth_vals.len() {
                    table.push_str(&format!(
                        "{class},{i},{},{},{},{}\n",
                        truth_vals[i], lap_vals[i], pp_vals[i], o.replica
                    ));
                }
            }
        }
        fs::write(dir.join(format!("params_{eps}.csv")), table)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reduced-model JSON
// ---------------------------------------------------------------------------

/// File schema for a reduced model. Matrices are row-major; `edge_order`
/// documents the complete-graph pair behind each `k_r` entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedModelFile {
    pub boundary: Vec<usize>,
    pub interior: Vec<usize>,
    pub edge_order: Vec<[usize; 2]>,
    pub k_r: Vec<Real>,
    pub k_red: Vec<Vec<Real>>,
    pub k_ac: Vec<Vec<Real>>,
    pub m: Vec<Real>,
    pub d: Vec<Real>,
    pub t: Vec<Real>,
    pub r: Vec<Real>,
}

pub fn reduced_to_json(model: &ReducedModel<Real>) -> String {
    let rows = |m: &nalgebra::DMatrix<Real>| -> Vec<Vec<Real>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    };
    let file = ReducedModelFile {
        boundary: model.boundary.clone(),
        interior: model.interior.clone(),
        edge_order: crate::kron::complete_edges(model.n_boundary())
            .into_iter()
            .map(|(i, j)| [i, j])
            .collect(),
        k_r: model.k_r.iter().copied().collect(),
        k_red: rows(&model.k_red),
        k_ac: rows(&model.k_ac),
        m: model.m.iter().copied().collect(),
        d: model.d.iter().copied().collect(),
        t: model.t.iter().copied().collect(),
        r: model.r.iter().copied().collect(),
    };
    serde_json::to_string_pretty(&file).expect("reduced model serializes")
}

pub fn reduced_from_json(text: &str) -> Result<ReducedModel<Real>, HarnessError> {
    let file: ReducedModelFile = serde_json::from_str(text)?;
    let g = file.boundary.len();
    let b = file.interior.len();
    let k_ac = nalgebra::DMatrix::from_fn(g, b, |i, j| file.k_ac[i][j]);
    let template = ReducedModel {
        boundary: file.boundary,
        interior: file.interior,
        k_red: nalgebra::DMatrix::zeros(g, g),
        k_ac,
        k_r: nalgebra::DVector::zeros(crate::kron::n_complete_edges(g)),
        m: nalgebra::DVector::zeros(g),
        d: nalgebra::DVector::zeros(g),
        t: nalgebra::DVector::from_row_slice(&file.t),
        r: nalgebra::DVector::from_row_slice(&file.r),
    };
    Ok(template.with_parameters(
        nalgebra::DVector::from_row_slice(&file.k_r),
        nalgebra::DVector::from_row_slice(&file.m),
        nalgebra::DVector::from_row_slice(&file.d),
    ))
}

/// One-line-per-epsilon textual summary for the CLI.
pub fn format_summaries<W: Write>(summaries: &[EpsilonSummary], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "epsilon  mean_L_lap    mean_L_pp     p10..p90 L_lap            p10..p90 L_pp")?;
    for s in summaries {
        writeln!(
            out,
            "{:<8} {:<13.6e} {:<13.6e} [{:.3e}, {:.3e}] [{:.3e}, {:.3e}]",
            s.epsilon, s.mean_l_lap, s.mean_l_pp, s.p10_l_lap, s.p90_l_lap, s.p10_l_pp, s.p90_l_pp
        )?;
    }
    Ok(())
}
