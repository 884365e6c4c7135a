//! Risk-sensitive path integral control.
//!
//! Numerical machinery for stochastic optimal control problems whose HJB
//! equation linearises under an exponential transform: control-affine
//! dynamics with constant full-rank noise, control-quadratic cost, and
//! control authority proportional to the noise covariance
//! (`B R⁻¹ Bᵀ = ψ Σ`). Under those assumptions the φ-sensitive optimal
//! value is an exponential average over *uncontrolled* trajectories with
//! exponent `A = φ − ψ`, which this crate estimates by Monte Carlo for
//! finite-horizon, discounted (lower bound only), and average-cost
//! formulations, and validates against closed-form linear-quadratic
//! Riccati oracles.
//!
//! Module map:
//!
//! - [`sde`]: Euler–Maruyama trajectory batches with per-path counter-based
//!   noise streams and left-endpoint cost integrals.
//! - [`risk`]: cost models, the (φ, ψ, λ) parameters, and the numerical
//!   check of the noise/control proportionality assumption.
//! - [`lq`]: algebraic and differential risk-sensitive Riccati solvers —
//!   the ground truth the estimators are tested against.
//! - [`estimators`]: log-domain Monte Carlo estimators for every
//!   path-integral quantity (finite-horizon value, average cost, the
//!   differential value, the discounted lower bound, Jensen-inequality
//!   checks, the stationary recurrence residual, policy evaluation).
//! - [`policy`]: gradients of value estimates under common random numbers
//!   and the feedback map `u = -R⁻¹Bᵀ∇V`.
//! - [`fit`]: prototype offline regression of a log-quadratic stationary
//!   value from trajectory segments.

pub mod estimators;
pub mod fit;
pub mod lq;
pub mod policy;
pub mod risk;
pub mod rng;
pub mod sde;

pub use estimators::{
    estimate_chi, estimate_diff_value, estimate_diff_value_single,
    estimate_discounted_lower_bound, estimate_fh_value, estimate_value_under_policy, jensen_gap,
    log_mean_exp, recurrence_residual, DiscountedBoundEstimate, EstimatorError, JensenGap,
    RecurrenceCheck, ValueEstimate,
};
pub use fit::{
    build_segments, fit_log_quadratic, fit_quality, FitError, FitQuality, QuadraticLogZParams,
    SegmentDataset, SegmentRecord,
};
pub use lq::{
    lq_finite_horizon_value, lq_stationary_values, solve_algebraic_riccati, solve_care_kleinman,
    solve_differential_riccati, solve_uncontrolled_are, DifferentialRiccatiSolution, LqError,
    LqSystem, RiccatiSolution, StationaryValues, UncontrolledAre,
};
pub use policy::{
    control_from_gradient, estimate_value_gradient, make_pic_policy, GradientEstimate,
    GradientOptions, LinearFeedback, PicPolicy, PolicyCacheConfig, PolicyMode, SeededValueFn,
};
pub use risk::{compute_psi, lambda_of, risk_expansion_check, RiskCostModel, RiskError, RiskParams};
pub use sde::{
    path_cost_integral, simulate_controlled, simulate_uncontrolled, Control, ControlPolicy,
    DiffusionModel, FnPolicy, McConfig, SimError, State, TrajectoryBatch,
};
