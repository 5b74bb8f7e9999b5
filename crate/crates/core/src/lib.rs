//! Privacy-preserving release of power-grid frequency-dynamics models.
//!
//! The pipeline takes a source network (inertia, damping, line sensitivities),
//! perturbs its parameters with calibrated Laplace noise, Kron-reduces the
//! perturbed network onto the generator buses, and then restores trajectory
//! fidelity by fitting the released parameters to a public frequency
//! trajectory with projected gradient descent driven by discrete-adjoint
//! gradients. A reverse-engineering attack audits what the release leaks.
//!
//! Modules follow the pipeline: [`grid`] (networks, Laplacians, file I/O),
//! [`kron`] (reduction), [`sim`] (fixed-step dynamics), [`dp`] (Laplace
//! mechanism and privacy accountant), [`adjoint`] (post-processing
//! optimization and gradient oracles), [`attack`] (recovery audit), and
//! [`harness`] (experiment sweeps and fidelity metrics).
//!
//! The numerical core is generic over the scalar type via [`scalar::Real`];
//! the aliases below fix `f64`, which is what the CLI and harness use.

pub mod adjoint;
pub mod attack;
pub mod datasets;
pub mod dp;
pub mod grid;
pub mod harness;
pub mod kron;
pub mod scalar;
pub mod sim;

pub use scalar::Real;

pub type NetworkModel = grid::NetworkModel<f64>;
pub type WeightedLaplacian = grid::WeightedLaplacian<f64>;
pub type ReducedModel = kron::ReducedModel<f64>;
pub type State = sim::State<f64>;
pub type LoadEvent = sim::LoadEvent<f64>;
pub type SimConfig = sim::SimConfig<f64>;
pub type Trajectory = sim::Trajectory<f64>;
pub type PrivacyParams = dp::PrivacyParams<f64>;
pub type Bounds = dp::Bounds<f64>;
pub type Accountant = dp::Accountant<f64>;
pub type ObfuscatedModel = dp::ObfuscatedModel<f64>;
pub type ReleaseManifest = dp::ReleaseManifest<f64>;
pub type Theta = adjoint::Theta<f64>;
pub type LossSpec = adjoint::LossSpec<f64>;
pub type OptConfig = adjoint::OptConfig<f64>;
pub type LossTrace = adjoint::LossTrace<f64>;
pub type RecoveryProblem = attack::RecoveryProblem<f64>;
pub type RecoveryReport = attack::RecoveryReport<f64>;
