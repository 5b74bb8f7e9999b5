//! Fixed-step simulation of the full partitioned system and the Kron-reduced
//! system under step-load disturbance events.
//!
//! Both integrators share one forward-Euler grid (`dt`, `horizon`), so the
//! full model with its interior angles eliminated algebraically per step is
//! step-for-step equivalent to simulating the reduced model. Loads are step
//! changes held constant after their activation time; the load applied over
//! `[t_n, t_n + dt)` is the sum of all events with `time <= t_n`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::NetworkModel;
use crate::kron::ReducedModel;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dt must be positive, got {dt}")]
    NonPositiveDt { dt: f64 },
    #[error("horizon {horizon} is not a positive multiple of dt {dt}")]
    BadHorizon { horizon: f64, dt: f64 },
    #[error("boundary node {id} has non-positive inertia")]
    ZeroInertia { id: usize },
    #[error("event at t = {time}: expected {expected} boundary loads, got {got}")]
    BoundaryDimMismatch { time: f64, expected: usize, got: usize },
    #[error("event at t = {time}: expected {expected} interior loads, got {got}")]
    InteriorDimMismatch { time: f64, expected: usize, got: usize },
    #[error("event with negative time {time}")]
    NegativeEventTime { time: f64 },
    #[error("events are not sorted by time (index {index})")]
    UnsortedEvents { index: usize },
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("interior block is singular")]
    SingularInterior,
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    StateDimMismatch { expected: usize, got: usize },
}

/// Deviation state of the boundary nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct State<F> {
    /// Frequency deviations (p.u.).
    pub omega: DVector<F>,
    /// Voltage phase-angle deviations (rad).
    pub delta: DVector<F>,
    /// Mechanical power deviations (p.u.).
    pub power: DVector<F>,
}

impl<F: Real> State<F> {
    pub fn zeros(g: usize) -> Self {
        Self { omega: DVector::zeros(g), delta: DVector::zeros(g), power: DVector::zeros(g) }
    }

    fn is_finite(&self) -> bool {
        !self.omega.iter().any(|x| x.is_bad())
            && !self.delta.iter().any(|x| x.is_bad())
            && !self.power.iter().any(|x| x.is_bad())
    }
}

/// Step load change activated at `time` and held afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadEvent<F> {
    pub time: F,
    /// Load deltas at boundary buses, in boundary order.
    pub boundary: DVector<F>,
    /// Load deltas at interior buses, in interior order.
    pub interior: DVector<F>,
}

impl<F: Real> LoadEvent<F> {
    pub fn scaled(&self, a: F) -> Self {
        Self { time: self.time, boundary: &self.boundary * a, interior: &self.interior * a }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig<F> {
    /// Step size (s).
    pub dt: F,
    /// Simulated horizon (s); must be a positive multiple of dt.
    pub horizon: F,
}

impl<F: Real> SimConfig<F> {
    pub fn new(dt: F, horizon: F) -> Result<Self, SimError> {
        let cfg = Self { dt, horizon };
        cfg.n_steps()?;
        Ok(cfg)
    }

    /// Number of Euler steps; the trajectory holds `n_steps() + 1` states.
    pub fn n_steps(&self) -> Result<usize, SimError> {
        if !(self.dt > F::zero()) {
            return Err(SimError::NonPositiveDt { dt: self.dt.lossy_f64() });
        }
        let ratio = (self.horizon / self.dt).lossy_f64();
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(SimError::BadHorizon {
                horizon: self.horizon.lossy_f64(),
                dt: self.dt.lossy_f64(),
            });
        }
        Ok(steps as usize)
    }
}

/// Provenance carried by a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta<F> {
    /// FNV-1a hash of the simulated model parameters.
    pub model_hash: u64,
    pub events: Vec<LoadEvent<F>>,
    pub seed: Option<u64>,
}

/// Time-indexed boundary states on a uniform grid. Column n of each matrix
/// is the state at `t_n = n dt`; state 0 is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub dt: F,
    pub times: Vec<F>,
    /// g x (steps + 1) frequency deviations.
    pub omega: DMatrix<F>,
    pub delta: DMatrix<F>,
    pub power: DMatrix<F>,
    pub meta: TrajectoryMeta<F>,
}

impl<F: Real> Trajectory<F> {
    pub fn n_states(&self) -> usize {
        self.times.len()
    }

    pub fn state_at(&self, n: usize) -> State<F> {
        State {
            omega: self.omega.column(n).into_owned(),
            delta: self.delta.column(n).into_owned(),
            power: self.power.column(n).into_owned(),
        }
    }
}

/// Pure selection of the frequency block, `H x`.
pub fn extract_frequencies<F: Real>(traj: &Trajectory<F>) -> DMatrix<F> {
    traj.omega.clone()
}

/// Squared-deviation integral between two frequency blocks on a shared
/// grid, by the left rectangle rule: `sum_{n=0}^{N-1} dt ||a_n - b_n||^2`.
pub fn trajectory_mismatch<F: Real>(a: &DMatrix<F>, b: &DMatrix<F>, dt: F) -> F {
    assert_eq!(a.shape(), b.shape(), "trajectory grids differ");
    let n_steps = a.ncols() - 1;
    let mut acc = F::zero();
    for n in 0..n_steps {
        for i in 0..a.nrows() {
            let e = a[(i, n)] - b[(i, n)];
            acc += e * e;
        }
    }
    acc * dt
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn hash_vectors<'a, F: Real + 'a>(parts: impl Iterator<Item = &'a DVector<F>>) -> u64 {
    let mut acc = 0xcbf2_9ce4_8422_2325u64;
    for v in parts {
        let h = fnv1a(v.iter().flat_map(|x| x.lossy_f64().to_bits().to_le_bytes()));
        acc = acc.rotate_left(7) ^ h;
    }
    acc
}

fn model_hash<F: Real>(model: &ReducedModel<F>) -> u64 {
    let ac = DVector::from_iterator(model.k_ac.len(), model.k_ac.iter().copied());
    hash_vectors([&model.k_r, &model.m, &model.d, &model.t, &model.r, &ac].into_iter())
}

/// Piecewise-constant load drive resolved onto the step grid.
///
/// For the reduced system each segment stores the combined boundary drive
/// `l_gamma + K_ac l_beta`; the full system keeps the two parts separate.
#[derive(Debug, Clone)]
pub struct LoadSchedule<F> {
    /// First step index of each segment; segment s covers steps
    /// `starts[s] .. starts[s+1]`.
    starts: Vec<usize>,
    pub gamma: Vec<DVector<F>>,
    pub beta: Vec<DVector<F>>,
}

impl<F: Real> LoadSchedule<F> {
    /// Accumulate sorted events into cumulative per-segment loads.
    pub fn build(
        events: &[LoadEvent<F>],
        cfg: &SimConfig<F>,
        n_boundary: usize,
        n_interior: usize,
    ) -> Result<Self, SimError> {
        let n_steps = cfg.n_steps()?;
        let mut prev = F::zero();
        for (index, ev) in events.iter().enumerate() {
            if ev.time < F::zero() {
                return Err(SimError::NegativeEventTime { time: ev.time.lossy_f64() });
            }
            if ev.time < prev {
                return Err(SimError::UnsortedEvents { index });
            }
            prev = ev.time;
            if ev.boundary.len() != n_boundary {
                return Err(SimError::BoundaryDimMismatch {
                    time: ev.time.lossy_f64(),
                    expected: n_boundary,
                    got: ev.boundary.len(),
                });
            }
            if ev.interior.len() != n_interior {
                return Err(SimError::InteriorDimMismatch {
                    time: ev.time.lossy_f64(),
                    expected: n_interior,
                    got: ev.interior.len(),
                });
            }
        }
        let mut starts = vec![0usize];
        let mut gamma = vec![DVector::zeros(n_boundary)];
        let mut beta = vec![DVector::zeros(n_interior)];
        for ev in events {
            // First step n with n dt >= event time.
            let step = (ev.time / cfg.dt).lossy_f64().ceil() as usize;
            if step > n_steps {
                continue; // activates after the horizon
            }
            let g_new = gamma.last().unwrap() + &ev.boundary;
            let b_new = beta.last().unwrap() + &ev.interior;
            if *starts.last().unwrap() == step {
                *gamma.last_mut().unwrap() = g_new;
                *beta.last_mut().unwrap() = b_new;
            } else {
                starts.push(step);
                gamma.push(g_new);
                beta.push(b_new);
            }
        }
        Ok(Self { starts, gamma, beta })
    }

    /// Segment index active at a given step.
    pub fn segment_at(&self, step: usize) -> usize {
        match self.starts.binary_search(&step) {
            Ok(s) => s,
            Err(s) => s - 1,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.starts.len()
    }

    pub fn segment_start(&self, s: usize) -> usize {
        self.starts[s]
    }
}

fn check_inertia<F: Real>(m: &DVector<F>, ids: &[usize]) -> Result<(), SimError> {
    for (i, &mi) in m.iter().enumerate() {
        if !(mi > F::zero()) {
            return Err(SimError::ZeroInertia { id: ids[i] });
        }
    }
    Ok(())
}

/// One explicit-Euler step of the reduced system:
/// `w+ = w + dt M^-1 (K_red d - D w + p - l_gamma - K_ac l_beta)`,
/// `d+ = d + dt w`, `p+ = p - dt T (p + R w)`.
pub fn step_reduced<F: Real>(
    state: &State<F>,
    model: &ReducedModel<F>,
    load: (&DVector<F>, &DVector<F>),
    dt: F,
) -> Result<State<F>, SimError> {
    let g = model.n_boundary();
    check_inertia(&model.m, &model.boundary)?;
    if state.omega.len() != g {
        return Err(SimError::StateDimMismatch { expected: g, got: state.omega.len() });
    }
    let (l_gamma, l_beta) = load;
    let mut rhs = &model.k_red * &state.delta;
    rhs -= l_gamma;
    rhs -= &model.k_ac * l_beta;
    for i in 0..g {
        rhs[i] += state.power[i] - model.d[i] * state.omega[i];
        rhs[i] /= model.m[i];
    }
    let omega = &state.omega + &rhs * dt;
    let delta = &state.delta + &state.omega * dt;
    let mut power = state.power.clone();
    for i in 0..g {
        power[i] -= dt * model.t[i] * (state.power[i] + model.r[i] * state.omega[i]);
    }
    let next = State { omega, delta, power };
    if !next.is_finite() {
        return Err(SimError::NonFinite { step: 0 });
    }
    Ok(next)
}

/// Simulate the reduced system over the configured horizon.
pub fn simulate_reduced<F: Real>(
    model: &ReducedModel<F>,
    events: &[LoadEvent<F>],
    cfg: &SimConfig<F>,
) -> Result<Trajectory<F>, SimError> {
    let g = model.n_boundary();
    check_inertia(&model.m, &model.boundary)?;
    let n_steps = cfg.n_steps()?;
    let schedule = LoadSchedule::build(events, cfg, g, model.n_interior())?;
    // Each segment's combined boundary drive l_gamma + K_ac l_beta.
    let drives: Vec<DVector<F>> = (0..schedule.n_segments())
        .map(|s| &schedule.gamma[s] + &model.k_ac * &schedule.beta[s])
        .collect();

    let mut omega = DMatrix::zeros(g, n_steps + 1);
    let mut delta = DMatrix::zeros(g, n_steps + 1);
    let mut power = DMatrix::zeros(g, n_steps + 1);
    let mut w = DVector::<F>::zeros(g);
    let mut dlt = DVector::<F>::zeros(g);
    let mut p = DVector::<F>::zeros(g);
    let mut rhs = DVector::<F>::zeros(g);
    let mut segment = 0usize;

    for n in 0..n_steps {
        if segment + 1 < schedule.n_segments() && schedule.segment_start(segment + 1) == n {
            segment += 1;
        }
        let drive = &drives[segment];
        // rhs = K_red delta - drive
        rhs.gemv(F::one(), &model.k_red, &dlt, F::zero());
        rhs -= drive;
        let mut bad = false;
        for i in 0..g {
            let w_dot = (rhs[i] + p[i] - model.d[i] * w[i]) / model.m[i];
            let p_dot = -model.t[i] * (p[i] + model.r[i] * w[i]);
            let w_new = w[i] + cfg.dt * w_dot;
            let d_new = dlt[i] + cfg.dt * w[i];
            let p_new = p[i] + cfg.dt * p_dot;
            bad |= w_new.is_bad() || d_new.is_bad() || p_new.is_bad();
            w[i] = w_new;
            dlt[i] = d_new;
            p[i] = p_new;
        }
        if bad {
            return Err(SimError::NonFinite { step: n + 1 });
        }
        omega.set_column(n + 1, &w);
        delta.set_column(n + 1, &dlt);
        power.set_column(n + 1, &p);
    }

    let times = (0..=n_steps).map(|n| F::from_usize(n).unwrap() * cfg.dt).collect();
    Ok(Trajectory {
        dt: cfg.dt,
        times,
        omega,
        delta,
        power,
        meta: TrajectoryMeta { model_hash: model_hash(model), events: events.to_vec(), seed: None },
    })
}

/// Simulate the full partitioned system. Interior angles are solved from the
/// algebraic row `delta_beta = K_bb^-1 (l_beta - K_bg delta_gamma)` each step;
/// boundary states advance by explicit Euler. Returns the boundary trajectory
/// and the interior angle trace (one vector per step, including t = 0).
pub fn simulate_full<F: Real>(
    net: &NetworkModel<F>,
    events: &[LoadEvent<F>],
    cfg: &SimConfig<F>,
) -> Result<(Trajectory<F>, Vec<DVector<F>>), SimError> {
    let g = net.boundary.len();
    let b = net.interior.len();
    let (m, d, t, r) = net.boundary_params();
    check_inertia(&m, &net.boundary_ids())?;
    let n_steps = cfg.n_steps()?;
    let schedule = LoadSchedule::build(events, cfg, g, b)?;

    let lap = net.laplacian();
    let blocks = crate::kron::partition(&lap, &net.boundary, &net.interior)
        .expect("validated network partitions");
    let bb_lu = blocks.bb.clone().lu();

    let mut omega = DMatrix::zeros(g, n_steps + 1);
    let mut delta = DMatrix::zeros(g, n_steps + 1);
    let mut power = DMatrix::zeros(g, n_steps + 1);
    let mut interior_angles = Vec::with_capacity(n_steps + 1);

    let mut w = DVector::<F>::zeros(g);
    let mut dlt = DVector::<F>::zeros(g);
    let mut p = DVector::<F>::zeros(g);
    let mut segment = 0usize;

    let solve_interior = |l_beta: &DVector<F>, dlt: &DVector<F>| -> Result<DVector<F>, SimError> {
        if b == 0 {
            return Ok(DVector::zeros(0));
        }
        let rhs = l_beta - &blocks.bg * dlt;
        bb_lu.solve(&rhs).ok_or(SimError::SingularInterior)
    };

    interior_angles.push(solve_interior(&schedule.beta[0], &dlt)?);

    for n in 0..n_steps {
        if segment + 1 < schedule.n_segments() && schedule.segment_start(segment + 1) == n {
            segment += 1;
        }
        let l_gamma = &schedule.gamma[segment];
        let l_beta = &schedule.beta[segment];
        let d_beta = solve_interior(l_beta, &dlt)?;

        let mut rhs = &blocks.gg * &dlt;
        if b > 0 {
            rhs += &blocks.gb * &d_beta;
        }
        let mut bad = false;
        for i in 0..g {
            let w_dot = (rhs[i] + p[i] - l_gamma[i] - d[i] * w[i]) / m[i];
            let p_dot = -t[i] * (p[i] + r[i] * w[i]);
            let w_new = w[i] + cfg.dt * w_dot;
            let d_new = dlt[i] + cfg.dt * w[i];
            let p_new = p[i] + cfg.dt * p_dot;
            bad |= w_new.is_bad() || d_new.is_bad() || p_new.is_bad();
            w[i] = w_new;
            dlt[i] = d_new;
            p[i] = p_new;
        }
        if bad {
            return Err(SimError::NonFinite { step: n + 1 });
        }
        omega.set_column(n + 1, &w);
        delta.set_column(n + 1, &dlt);
        power.set_column(n + 1, &p);
        interior_angles.push(solve_interior(l_beta, &dlt)?);
    }

    let times: Vec<F> = (0..=n_steps).map(|n| F::from_usize(n).unwrap() * cfg.dt).collect();
    let hash = {
        let weights = net.edge_weights();
        hash_vectors([&weights, &m, &d, &t, &r].into_iter())
    };
    let traj = Trajectory {
        dt: cfg.dt,
        times,
        omega,
        delta,
        power,
        meta: TrajectoryMeta { model_hash: hash, events: events.to_vec(), seed: None },
    };
    Ok((traj, interior_angles))
}

/// Write a trajectory as CSV: `t,omega_<id>...,delta_<id>...,p_<id>...`,
/// one row per step, 15 significant digits.
pub fn write_trajectory_csv<F: Real, W: Write>(
    traj: &Trajectory<F>,
    boundary_ids: &[usize],
    out: &mut W,
) -> std::io::Result<()> {
    write!(out, "t")?;
    for prefix in ["omega", "delta", "p"] {
        for id in boundary_ids {
            write!(out, ",{prefix}_{id}")?;
        }
    }
    writeln!(out)?;
    let g = boundary_ids.len();
    for n in 0..traj.n_states() {
        write!(out, "{:.14e}", traj.times[n])?;
        for block in [&traj.omega, &traj.delta, &traj.power] {
            for i in 0..g {
                write!(out, ",{:.14e}", block[(i, n)])?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Read back the frequency block of a trajectory CSV written by
/// [`write_trajectory_csv`]: returns (times, omega matrix, boundary ids).
pub fn read_trajectory_omega<F: Real>(
    text: &str,
) -> Result<(Vec<F>, DMatrix<F>, Vec<usize>), String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trajectory file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err("first column must be t".into());
    }
    let mut ids = Vec::new();
    for c in &cols[1..] {
        if let Some(id) = c.strip_prefix("omega_") {
            ids.push(id.parse::<usize>().map_err(|e| format!("bad column {c}: {e}"))?);
        }
    }
    if ids.is_empty() {
        return Err("no omega_<id> columns found".into());
    }
    let mut times = Vec::new();
    let mut rows: Vec<Vec<F>> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 1 + ids.len() {
            return Err(format!("row {}: too few fields", ln + 2));
        }
        let parse = |s: &str| -> Result<F, String> {
            s.trim().parse::<f64>().map(F::of).map_err(|e| format!("row {}: {e}", ln + 2))
        };
        times.push(parse(fields[0])?);
        rows.push(fields[1..=ids.len()].iter().map(|s| parse(s)).collect::<Result<_, _>>()?);
    }
    let omega = DMatrix::from_fn(ids.len(), rows.len(), |i, n| rows[n][i]);
    Ok((times, omega, ids))
}
