//! Command-line pipeline: simulate grid dynamics, Kron-reduce networks,
//! produce private releases, post-process them against a public trajectory,
//! audit releases with the recovery attack, and run full experiment sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use gridveil::adjoint::{postprocess, LossSpec};
use gridveil::attack::{gauss_newton_recover, recover_star, RecoveryProblem};
use gridveil::dp::dp_release;
use gridveil::grid::Conventions;
use gridveil::harness::{
    self, event_from_bus_deltas, format_summaries, load_network_source, run_sweep,
    ExperimentConfig, HarnessError, TransientMode,
};
use gridveil::kron::reduce_network;
use gridveil::sim::{read_trajectory_omega, simulate_full, simulate_reduced, write_trajectory_csv};
use gridveil::{Bounds, LoadEvent, NetworkModel, PrivacyParams, ReleaseManifest, SimConfig};

#[derive(Parser)]
#[command(name = "gridveil", version, about = "Private release of power-grid frequency-dynamics models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConventionFlags {
    /// Interpret node droop r as inverse (use 1/r in the governor equation).
    #[arg(long)]
    droop_is_inverse: bool,
    /// Interpret node t as a time constant (use 1/t as the governor rate).
    #[arg(long)]
    governor_time_constant: bool,
}

impl ConventionFlags {
    fn conventions(&self) -> Conventions {
        Conventions {
            droop_is_inverse: self.droop_is_inverse,
            governor_is_time_constant: self.governor_time_constant,
        }
    }
}

#[derive(Args, Clone)]
struct EventFlags {
    /// JSON event file: [{"time": 10.0, "deltas": {"3": 0.2}}].
    #[arg(long)]
    events: Option<PathBuf>,
    /// Uniform fractional load change applied to every bus.
    #[arg(long)]
    uniform_scale: Option<f64>,
    /// Activation time for --uniform-scale (s).
    #[arg(long, default_value_t = 0.0)]
    event_time: f64,
}

impl EventFlags {
    fn build(&self, net: &NetworkModel) -> Result<Vec<LoadEvent>> {
        if let Some(path) = &self.events {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading events file {}", path.display()))?;
            return parse_events(net, &text);
        }
        let scale = self.uniform_scale.unwrap_or(0.2);
        let deltas: Vec<(usize, f64)> =
            net.nodes.iter().map(|p| (p.id, scale * p.load)).collect();
        Ok(vec![event_from_bus_deltas(net, self.event_time, &deltas)?])
    }
}

#[derive(serde::Deserialize)]
struct EventFile {
    time: f64,
    deltas: BTreeMap<String, f64>,
}

fn parse_events(net: &NetworkModel, text: &str) -> Result<Vec<LoadEvent>> {
    let files: Vec<EventFile> = serde_json::from_str(text).context("parsing events JSON")?;
    let mut events = Vec::with_capacity(files.len());
    for f in files {
        let deltas: Vec<(usize, f64)> = f
            .deltas
            .iter()
            .map(|(id, d)| Ok((id.parse::<usize>().context("bus id must be an integer")?, *d)))
            .collect::<Result<_>>()?;
        events.push(event_from_bus_deltas(net, f.time, &deltas)?);
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(events)
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the full or Kron-reduced model under load events.
    Simulate {
        /// Network file or builtin:ieee30 / builtin:star5.
        #[arg(long)]
        network: String,
        /// Simulate the full partitioned system instead of the reduction.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 30.0)]
        horizon: f64,
        #[command(flatten)]
        events: EventFlags,
        #[command(flatten)]
        conventions: ConventionFlags,
        /// Output trajectory CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Kron-reduce a network onto its boundary set.
    Reduce {
        #[arg(long)]
        network: String,
        #[command(flatten)]
        conventions: ConventionFlags,
        /// Output reduced-model JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce a private release manifest.
    Release {
        #[arg(long)]
        network: String,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha_k: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha_m: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha_d: f64,
        #[command(flatten)]
        conventions: ConventionFlags,
        /// Output manifest JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a released model to a public frequency trajectory.
    Postprocess {
        /// Release manifest to post-process.
        #[arg(long)]
        manifest: PathBuf,
        /// Source network (public loads and event construction).
        #[arg(long)]
        network: String,
        /// Reference trajectory CSV; simulated from the source model when
        /// absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        events: EventFlags,
        #[arg(long, default_value_t = 100.0)]
        eta: f64,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        rho: f64,
        /// Early-stop tolerance on the trajectory mismatch.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 30.0)]
        horizon: f64,
        #[command(flatten)]
        conventions: ConventionFlags,
        /// Updated manifest path.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV path.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Reverse-engineer original weights from a reduced model.
    Attack {
        /// Release manifest holding the reduced weights.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Reduced-model JSON (alternative input).
        #[arg(long)]
        reduced: Option<PathBuf>,
        /// Attack the post-processed weights instead of the Laplace-only ones.
        #[arg(long)]
        use_postprocessed: bool,
        /// Ground-truth star network for the error metric.
        #[arg(long)]
        truth: Option<String>,
        /// Solve by Gauss-Newton instead of the analytic star formula.
        #[arg(long)]
        gauss_newton: bool,
        /// Output recovery report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the (epsilon, seed) experiment sweep.
    Sweep {
        /// Experiment config JSON; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CI profile: 20 replicas, 150 iterations.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        network: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        base_seed: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        /// Comma-separated privacy levels, e.g. 0.5,1,2.
        #[arg(long)]
        epsilons: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        /// Use the five preset transients instead of random ones.
        #[arg(long)]
        preset_transients: bool,
        #[arg(long)]
        transient_count: Option<usize>,
        #[command(flatten)]
        conventions: ConventionFlags,
    },
    /// Validate a network file and report violations.
    Validate {
        #[arg(long)]
        network: String,
    },
}

fn load_net(source: &str, conv: &ConventionFlags) -> Result<NetworkModel> {
    let net = load_network_source(source)
        .with_context(|| format!("loading network '{source}'"))?;
    Ok(net.apply_conventions(conv.conventions()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { network, full, dt, horizon, events, conventions, out } => {
            let net = load_net(&network, &conventions)?;
            let evs = events.build(&net)?;
            let sim = SimConfig::new(dt, horizon)?;
            let traj = if full {
                simulate_full(&net, &evs, &sim)?.0
            } else {
                simulate_reduced(&reduce_network(&net)?, &evs, &sim)?
            };
            let mut file = fs::File::create(&out)?;
            write_trajectory_csv(&traj, &net.boundary_ids(), &mut file)?;
            println!("wrote {} ({} steps, {} boundary nodes)", out.display(), traj.n_states() - 1, net.boundary.len());
        }
        Command::Reduce { network, conventions, out } => {
            let net = load_net(&network, &conventions)?;
            let reduced = reduce_network(&net)?;
            fs::write(&out, harness::reduced_to_json(&reduced))?;
            println!(
                "wrote {} ({} boundary, {} interior, {} reduced weights)",
                out.display(), reduced.n_boundary(), reduced.n_interior(), reduced.k_r.len()
            );
        }
        Command::Release { network, epsilon, seed, alpha_k, alpha_m, alpha_d, conventions, out } => {
            let net = load_net(&network, &conventions)?;
            let mut params = PrivacyParams::new(epsilon);
            params.alpha_k = alpha_k;
            params.alpha_m = alpha_m;
            params.alpha_d = alpha_d;
            let obf = dp_release(&net, &params, &Bounds::default(), seed)?;
            let manifest = ReleaseManifest::from_release(&obf, &net);
            fs::write(&out, manifest.to_json())?;
            println!(
                "wrote {} (epsilon {}, accountant total {})",
                out.display(), epsilon, obf.accountant.total()
            );
        }
        Command::Postprocess {
            manifest, network, reference, events, eta, iters, rho, tol, dt, horizon,
            conventions, out, trace,
        } => {
            let net = load_net(&network, &conventions)?;
            let manifest_text = fs::read_to_string(&manifest)?;
            let man: ReleaseManifest = ReleaseManifest::from_json(&manifest_text)?;
            let obf = man.to_obfuscated();
            let evs = events.build(&net)?;
            let sim = SimConfig::new(dt, horizon)?;
            let omega_ref = match &reference {
                Some(path) => {
                    let text = fs::read_to_string(path)?;
                    let (_, omega, _) =
                        read_trajectory_omega::<f64>(&text).map_err(anyhow::Error::msg)?;
                    omega
                }
                None => simulate_reduced(&reduce_network(&net)?, &evs, &sim)?.omega,
            };
            let spec = LossSpec::for_release(&obf, omega_ref, evs, sim, rho)?;
            let cfg = gridveil::OptConfig { eta, max_iters: iters, bounds: man.bounds, tol };
            let fitted = postprocess(&obf, &spec, &cfg)?;
            let first = fitted.trace.rows.first().map(|r| r.mismatch).unwrap_or(f64::NAN);
            let last = fitted.trace.rows.last().map(|r| r.mismatch).unwrap_or(f64::NAN);
            if let Some(path) = trace {
                fs::write(&path, fitted.trace.to_csv())?;
            }
            let updated = man.with_post_processing((&fitted.theta).into(), &fitted.accountant);
            fs::write(&out, updated.to_json())?;
            println!("wrote {} (mismatch {first:.6e} -> {last:.6e})", out.display());
        }
        Command::Attack { manifest, reduced, use_postprocessed, truth, gauss_newton, out } => {
            let k_red: DVector<f64> = match (&manifest, &reduced) {
                (Some(path), _) => {
                    let man: ReleaseManifest =
                        ReleaseManifest::from_json(&fs::read_to_string(path)?)?;
                    let model = if use_postprocessed {
                        man.postprocessed_model()
                            .context("manifest has no post-processed parameters")?
                    } else {
                        man.laplace_model()
                    };
                    model.k_r
                }
                (None, Some(path)) => {
                    harness::reduced_from_json(&fs::read_to_string(path)?)?.k_r
                }
                (None, None) => bail!("provide --manifest or --reduced"),
            };
            let problem = RecoveryProblem::star(k_red.clone())?;
            let mut report = if gauss_newton {
                let init = DVector::from_element(problem.n_boundary(), 1.0);
                gauss_newton_recover(&problem, &init)?
            } else {
                let k_hat = recover_star(&k_red)?;
                let residual_norm =
                    gridveil::attack::recovery_residuals(&problem, &k_hat)?.norm();
                gridveil::RecoveryReport {
                    k_hat,
                    residual_norm,
                    rel_error: None,
                    iters: 0,
                    determinacy: problem.determinacy(),
                }
            };
            if let Some(src) = truth {
                let net = load_network_source(&src)?;
                let hub = *net.interior.first().context("truth network has no interior node")?;
                let weights: Vec<f64> = net
                    .boundary
                    .iter()
                    .map(|&b| {
                        net.edges
                            .iter()
                            .find(|e| (e.from == b && e.to == hub) || (e.to == b && e.from == hub))
                            .map(|e| e.weight)
                            .context("truth network is not a star")
                    })
                    .collect::<Result<_>>()?;
                report = report.with_truth(&DVector::from_vec(weights));
            }
            fs::write(&out, report.to_json())?;
            println!(
                "wrote {} (residual {:.3e}, rel error {:?})",
                out.display(), report.residual_norm, report.rel_error
            );
        }
        Command::Sweep {
            config, quick, network, out_dir, base_seed, replicas, iters, eta, rho,
            epsilons, workers, preset_transients, transient_count, conventions,
        } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            if quick {
                cfg = cfg.quick();
            }
            if let Some(v) = network {
                cfg.network = v;
            }
            if let Some(v) = out_dir {
                cfg.out_dir = v;
            }
            if let Some(v) = base_seed {
                cfg.base_seed = v;
            }
            if let Some(v) = replicas {
                cfg.replicas = v;
            }
            if let Some(v) = iters {
                cfg.opt.max_iters = v;
            }
            if let Some(v) = eta {
                cfg.opt.eta = v;
            }
            if let Some(v) = rho {
                cfg.rho = v;
            }
            if let Some(list) = epsilons {
                cfg.epsilons = list
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().context("bad epsilon"))
                    .collect::<Result<_>>()?;
            }
            if let Some(v) = workers {
                cfg.workers = v;
            }
            if preset_transients {
                cfg.transients.mode = TransientMode::Preset;
            }
            if let Some(v) = transient_count {
                cfg.transients.count = v;
            }
            let flags = conventions.conventions();
            if flags.droop_is_inverse {
                cfg.conventions.droop_is_inverse = true;
            }
            if flags.governor_is_time_constant {
                cfg.conventions.governor_is_time_constant = true;
            }
            cfg.apply_env_overrides()?;
            let result = run_sweep(&cfg)?;
            let mut stdout = std::io::stdout();
            format_summaries(&result.summaries, &mut stdout)?;
            println!("outputs under {}", cfg.out_dir.display());
        }
        Command::Validate { network } => match load_network_source(&network) {
            Ok(net) => {
                println!(
                    "OK: {} nodes, {} edges, {} boundary, total load {}",
                    net.n_nodes(), net.edges.len(), net.boundary.len(), net.total_load()
                );
            }
            Err(HarnessError::Grid(e)) => {
                eprintln!("INVALID: {e}");
                std::process::exit(1);
            }
            Err(e) => {
                eprintln!("ERROR: {e}");
                std::process::exit(2);
            }
        },
    }
    Ok(())
}
