//! Monte Carlo estimators for the path-integral value functions.
//!
//! Every estimator is an exponential average over uncontrolled (or, for
//! policy evaluation, controlled) trajectories:
//!
//! ```text
//! V̂ = (1/A) log (1/K) Σ_i exp(A J_i)
//! ```
//!
//! evaluated in the log domain with max-shifting so raw weights are never
//! materialized. Standard errors come from the delta method applied to the
//! log of a mean; the effective sample size `(Σw)²/Σw²` of the shifted
//! weights diagnoses degeneracy of the exponential average. Heavy-tailed
//! weights are intrinsic here, so a collapsing ESS raises a flag on the
//! estimate instead of failing.
//!
//! Implemented quantities, all over a shared trajectory mechanism with
//! per-path noise streams (common random numbers wherever two estimates are
//! compared):
//!
//! - finite-horizon value of the transformed problem (exponent `A = φ − ψ`),
//! - the average cost per stage `χ` via a two-point slope in the horizon,
//! - the differential value `v(x) − v(x_ref)` under shared noise,
//! - a truncated discounted value, reported with its tail-bias bound
//!   (a lower bound on the discounted optimal value),
//! - both directions of the discounted Jensen inequality,
//! - the stationary recurrence residual of a candidate `z`,
//! - risk-sensitive evaluation of an explicit feedback policy.


use thiserror::Error;

use crate::risk::{RiskCostModel, RiskError, RiskParams, DEGENERATE_RISK_GAP};
use crate::sde::{fold_paths, ControlPolicy, CostAccum, DiffusionModel, McConfig, SimError, State, StateCostFn};

/// Estimates with ESS below this fraction of K are flagged.
pub const LOW_ESS_FRACTION: f64 = 0.01;
/// Default truncation tail for discounted estimators: the horizon is chosen
/// so that `exp(-α T) <= DEFAULT_TAIL_EPS`.
pub const DEFAULT_TAIL_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("degenerate exponent {exponent:.3e}; the exponential transform is undefined")]
    DegenerateExponent { exponent: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("candidate z returned a non-positive value {value} at a sampled state")]
    NonPositiveZ { value: f64 },
}

fn check_exponent(a_exp: f64) -> Result<(), EstimatorError> {
    if !a_exp.is_finite() || a_exp.abs() < DEGENERATE_RISK_GAP {
        return Err(EstimatorError::DegenerateExponent { exponent: a_exp });
    }
    Ok(())
}

/// Log-domain Monte Carlo estimate.
#[derive(Clone, Debug)]
pub struct ValueEstimate {
    /// Estimated value, in cost units.
    pub value: f64,
    /// Delta-method standard error, same units.
    pub std_error: f64,
    /// Effective sample size of the exponential weights, in `[1, K]`.
    pub ess: f64,
    /// Number of sampled paths.
    pub n_samples: usize,
    /// Exponent used inside the exponential average.
    pub exponent: f64,
    /// Set when `ess < 0.01 K`: the estimate stands but its weights are
    /// dominated by few paths.
    pub low_ess: bool,
}

impl ValueEstimate {
    fn from_log_weights(logw: &[f64], a_exp: f64) -> Self {
        let stats = weight_stats(logw);
        let k = logw.len();
        Self {
            value: stats.lme / a_exp,
            std_error: stats.se_lme / a_exp.abs(),
            ess: stats.ess,
            n_samples: k,
            exponent: a_exp,
            low_ess: stats.ess < LOW_ESS_FRACTION * k as f64,
        }
    }
}

/// Numerically stable `log((1/K) Σ exp(v_i))`.
///
/// Entries must be finite or `-∞`; an all-`-∞` input returns `-∞`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "log_mean_exp needs at least one value");
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

struct WeightStats {
    lme: f64,
    se_lme: f64,
    ess: f64,
}

fn weight_stats(logw: &[f64]) -> WeightStats {
    let k = logw.len();
    assert!(k >= 1);
    let max = logw.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max == f64::NEG_INFINITY {
        return WeightStats {
            lme: f64::NEG_INFINITY,
            se_lme: 0.0,
            ess: k as f64,
        };
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &l in logw {
        let w = (l - max).exp();
        sum += w;
        sum_sq += w * w;
    }
    let kf = k as f64;
    let m1 = sum / kf;
    let var = ((sum_sq - kf * m1 * m1) / (kf - 1.0)).max(0.0);
    WeightStats {
        lme: max + m1.ln(),
        se_lme: (var / kf).sqrt() / m1,
        ess: if sum_sq > 0.0 { sum * sum / sum_sq } else { kf },
    }
}

/// Delta-method standard error of `lme(a) - lme(b)` for paired samples
/// (entry `i` of both arrays comes from the same path), which captures the
/// variance reduction of common random numbers.
fn paired_diff_se(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    debug_assert_eq!(k, b.len());
    let max_a = a.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let max_b = b.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mean_a: f64 = a.iter().map(|v| (v - max_a).exp()).sum::<f64>() / k as f64;
    let mean_b: f64 = b.iter().map(|v| (v - max_b).exp()).sum::<f64>() / k as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..k {
        let d = (a[i] - max_a).exp() / mean_a - (b[i] - max_b).exp() / mean_b;
        sum += d;
        sum_sq += d * d;
    }
    let kf = k as f64;
    let var = ((sum_sq - sum * sum / kf) / (kf - 1.0)).max(0.0);
    (var / kf).sqrt()
}

/// Per-path finite-horizon costs `J_i = ∫ q dt + m(X(T))` over uncontrolled
/// dynamics. The integral is undiscounted; the step count is derived from
/// `horizon` and `cfg.dt`.
pub fn sample_fh_costs(
    model: &DiffusionModel,
    cost: &RiskCostModel,
    x: &State,
    horizon: f64,
    cfg: &McConfig,
) -> Result<Vec<f64>, EstimatorError> {
    let cfg = cfg.for_horizon(horizon)?;
    let q = cost.state_cost();
    let terminal = cost.terminal_cost();
    let costs = fold_paths(
        model,
        None,
        x,
        cfg.steps,
        &cfg,
        || CostAccum::new(q, 0.0, cfg.dt, None).require_nonneg(),
        |acc, ctx| acc.add_step(ctx.path, ctx.step, ctx.time, ctx.state, None),
        |acc, x_end| acc.finish(0, x_end, terminal),
    )?;
    Ok(costs)
}

/// Finite-horizon value of the transformed problem over *uncontrolled*
/// dynamics:
///
/// ```text
/// V̂ = (1/A) log E⁰[ exp(A J⁰_T) ],   A = φ − ψ
/// ```
///
/// Under control-quadratic cost and `BR⁻¹Bᵀ = ψΣ` this equals the optimal
/// φ-sensitive finite-horizon value.
pub fn estimate_fh_value(
    model: &DiffusionModel,
    cost: &RiskCostModel,
    params: &RiskParams,
    x: &State,
    horizon: f64,
    cfg: &McConfig,
) -> Result<ValueEstimate, EstimatorError> {
    let a_exp = params.exponent;
    check_exponent(a_exp)?;
    let costs = sample_fh_costs(model, cost, x, horizon, cfg)?;
    let logw: Vec<f64> = costs.iter().map(|j| a_exp * j).collect();
    Ok(ValueEstimate::from_log_weights(&logw, a_exp))
}

/// Average cost per stage of the `A`-sensitive functional,
///
/// ```text
/// χ(A) = lim_{T→∞} (1/T)(1/A) log E[ exp(A ∫_0^T q dt) ],
/// ```
///
/// estimated by the two-point slope `(G(T2) − G(T1))/(T2 − T1)` on a single
/// batch simulated to `T2` (prefix costs share the noise). The slope cancels
/// the O(1) differential-value offset that contaminates `G(T)/T`.
pub fn estimate_chi(
    model: &DiffusionModel,
    q: &StateCostFn,
    a_exp: f64,
    t1: f64,
    t2: f64,
    x: &State,
    cfg: &McConfig,
) -> Result<ValueEstimate, EstimatorError> {
    check_exponent(a_exp)?;
    if !(t1 > 0.0) || !(t2 > t1) {
        return Err(EstimatorError::InvalidArgument(
            "horizons must satisfy 0 < T1 < T2".into(),
        ));
    }
    let cfg2 = cfg.for_horizon(t2)?;
    let steps1 = McConfig::steps_for_horizon(cfg.dt, t1)?;
    let pairs = fold_paths(
        model,
        None,
        x,
        cfg2.steps,
        &cfg2,
        || (CostAccum::new(q, 0.0, cfg2.dt, None).require_nonneg(), 0.0f64),
        |(acc, j1), ctx| {
            if ctx.step == steps1 {
                *j1 = acc.sum;
            }
            acc.add_step(ctx.path, ctx.step, ctx.time, ctx.state, None)
        },
        |(acc, mut j1), _x_end| {
            if steps1 == cfg2.steps {
                j1 = acc.sum;
            }
            Ok((j1, acc.sum))
        },
    )?;
    let l1: Vec<f64> = pairs.iter().map(|(j1, _)| a_exp * j1).collect();
    let l2: Vec<f64> = pairs.iter().map(|(_, j2)| a_exp * j2).collect();
    let g1 = log_mean_exp(&l1) / a_exp;
    let g2 = log_mean_exp(&l2) / a_exp;
    let span = t2 - t1;
    let se = paired_diff_se(&l2, &l1) / (a_exp.abs() * span);
    let stats2 = weight_stats(&l2);
    let k = pairs.len();
    Ok(ValueEstimate {
        value: (g2 - g1) / span,
        std_error: se,
        ess: stats2.ess,
        n_samples: k,
        exponent: a_exp,
        low_ess: stats2.ess < LOW_ESS_FRACTION * k as f64,
    })
}

/// Differential value `v(x) − v(x_ref)` of the average-cost setting,
/// estimated as a difference of finite-horizon log-averages with *identical*
/// noise streams for both starting states. The average-cost rate χ cancels
/// in the difference; see [`estimate_diff_value_single`] for the χ-explicit
/// diagnostic form.
pub fn estimate_diff_value(
    model: &DiffusionModel,
    q: &StateCostFn,
    a_exp: f64,
    x: &State,
    x_ref: &State,
    horizon: f64,
    cfg: &McConfig,
) -> Result<ValueEstimate, EstimatorError> {
    check_exponent(a_exp)?;
    let lx = diff_value_log_weights(model, q, a_exp, x, horizon, cfg)?;
    let lref = diff_value_log_weights(model, q, a_exp, x_ref, horizon, cfg)?;
    let value = (log_mean_exp(&lx) - log_mean_exp(&lref)) / a_exp;
    let se = paired_diff_se(&lx, &lref) / a_exp.abs();
    let sx = weight_stats(&lx);
    let sref = weight_stats(&lref);
    let ess = sx.ess.min(sref.ess);
    let k = lx.len();
    Ok(ValueEstimate {
        value,
        std_error: se,
        ess,
        n_samples: k,
        exponent: a_exp,
        low_ess: ess < LOW_ESS_FRACTION * k as f64,
    })
}

fn diff_value_log_weights(
    model: &DiffusionModel,
    q: &StateCostFn,
    a_exp: f64,
    x: &State,
    horizon: f64,
    cfg: &McConfig,
) -> Result<Vec<f64>, EstimatorError> {
    let cfg = cfg.for_horizon(horizon)?;
    let costs = fold_paths(
        model,
        None,
        x,
        cfg.steps,
        &cfg,
        || CostAccum::new(q, 0.0, cfg.dt, None).require_nonneg(),
        |acc, ctx| acc.add_step(ctx.path, ctx.step, ctx.time, ctx.state, None),
        |acc, _x_end| Ok(acc.sum),
    )?;
    Ok(costs.iter().map(|j| a_exp * j).collect())
}

/// Single-point diagnostic form of the differential value,
/// `v̂ = (1/A) log E[exp(A (J_T − χ T))]`, requiring an external χ.
///
/// The stationary problem is scale-free in the transformed value, and this
/// form converges to the differential value only up to a constant,
/// state-independent offset (a terminal-layer integral); differences of its
/// values are gauge-free and match [`estimate_diff_value`].
pub fn estimate_diff_value_single(
    model: &DiffusionModel,
    q: &StateCostFn,
    a_exp: f64,
    chi: f64,
    x: &State,
    horizon: f64,
    cfg: &McConfig,
) -> Result<ValueEstimate, EstimatorError> {
    check_exponent(a_exp)?;
    let logw = diff_value_log_weights(model, q, a_exp, x, horizon, cfg)?;
    let shifted: Vec<f64> = logw.iter().map(|l| l - a_exp * chi * horizon).collect();
    Ok(ValueEstimate::from_log_weights(&shifted, a_exp))
}

/// Truncated discounted estimate together with its truncation bookkeeping.
#[derive(Clone, Debug)]
pub struct DiscountedBoundEstimate {
    pub estimate: ValueEstimate,
    /// Horizon actually simulated; `exp(-α T) <= tail_eps`.
    pub truncation_horizon: f64,
    /// Bound on the truncation bias: `tail_eps * q̄ / α` with `q̄` the
    /// empirical mean of `q` over the final 10% of the horizon.
    pub tail_bound: f64,
}

/// Discounted value of the `A`-sensitive functional over uncontrolled
/// dynamics,
///
/// ```text
/// V̂ = (1/A) log E[ exp(A ∫ e^{-αt} q dt) ],
/// ```
///
/// truncated at the horizon where the discount factor reaches `tail_eps`.
/// The φ-sensitive discounted *optimal* value has no exact path-integral
/// representation; this functional (with `A = φ − ψ`) is the candidate
/// surrogate for it, and its ordering against policy evaluations is
/// configuration-dependent — the `disc-bound` experiment measures it.
pub fn estimate_discounted_lower_bound(
    model: &DiffusionModel,
    q: &StateCostFn,
    a_exp: f64,
    alpha: f64,
    x: &State,
    cfg: &McConfig,
    tail_eps: Option<f64>,
) -> Result<DiscountedBoundEstimate, EstimatorError> {
    check_exponent(a_exp)?;
    if !(alpha > 0.0) {
        return Err(EstimatorError::InvalidArgument(
            "discounted estimation needs alpha > 0".into(),
        ));
    }
    let tail = tail_eps.unwrap_or(DEFAULT_TAIL_EPS);
    if !(tail > 0.0 && tail < 1.0) {
        return Err(EstimatorError::InvalidArgument("tail_eps must be in (0, 1)".into()));
    }
    let horizon = (1.0 / tail).ln() / alpha;
    let steps = (horizon / cfg.dt).ceil() as usize;
    let mut cfg_t = cfg.clone();
    cfg_t.steps = steps.max(1);
    let tail_start = (0.9 * cfg_t.steps as f64).floor() as usize;

    let outs = fold_paths(
        model,
        None,
        x,
        cfg_t.steps,
        &cfg_t,
        || (CostAccum::new(q, alpha, cfg_t.dt, None), 0.0f64, 0usize),
        |(acc, qtail, count), ctx| {
            if ctx.step >= tail_start {
                *qtail += q(ctx.state);
                *count += 1;
            }
            acc.add_step(ctx.path, ctx.step, ctx.time, ctx.state, None)
        },
        |(acc, qtail, count), _x_end| Ok((acc.sum, qtail, count)),
    )?;
    let logw: Vec<f64> = outs.iter().map(|(j, _, _)| a_exp * j).collect();
    let total_tail: f64 = outs.iter().map(|(_, qt, _)| qt).sum();
    let total_count: usize = outs.iter().map(|(_, _, c)| c).sum();
    let q_bar = if total_count > 0 {
        total_tail / total_count as f64
    } else {
        0.0
    };
    Ok(DiscountedBoundEstimate {
        estimate: ValueEstimate::from_log_weights(&logw, a_exp),
        truncation_horizon: cfg_t.steps as f64 * cfg_t.dt,
        tail_bound: tail * q_bar / alpha,
    })
}

/// Both sides of the discounted Jensen inequality, log domain.
#[derive(Clone, Debug)]
pub struct JensenGap {
    /// `log Ẑ(A e^{-α r}, x)`.
    pub lhs_log: f64,
    /// `e^{-α(1-β)r} · log Ẑ(A e^{-αβr}, x)`.
    pub rhs_log: f64,
    /// Delta-method standard error of `rhs_log − lhs_log` under shared noise.
    pub std_error: f64,
    /// Whether the observed ordering matches the β-regime: `lhs ≤ rhs` for
    /// β < 1, flipped for β > 1, equality for β = 1 (all with 3·SE slack).
    pub direction_ok: bool,
    pub beta: f64,
}

/// Empirical check of the discounted interpolation inequality
///
/// ```text
/// Z(A e^{-αr}, x)  ≤  Z(A e^{-αβr}, x)^{e^{-α(1-β)r}}      (β < 1)
/// ```
///
/// with the direction flipping for β > 1 and exact equality at β = 1. Both
/// sides are evaluated on one set of truncated discounted path costs, so with
/// shared noise the sample inequality is a strict power-mean identity and the
/// check isolates the exponent bookkeeping.
pub fn jensen_gap(
    model: &DiffusionModel,
    q: &StateCostFn,
    a_exp: f64,
    alpha: f64,
    r: f64,
    beta: f64,
    x: &State,
    cfg: &McConfig,
    tail_eps: Option<f64>,
) -> Result<JensenGap, EstimatorError> {
    if !(alpha > 0.0) || !(r > 0.0) || !(beta > 0.0) {
        return Err(EstimatorError::InvalidArgument(
            "jensen_gap needs alpha > 0, r > 0, beta > 0".into(),
        ));
    }
    let inner = a_exp * (-alpha * beta * r).exp();
    let power = (-alpha * (1.0 - beta) * r).exp();
    check_exponent(inner)?;
    check_exponent(inner * power)?;

    let tail = tail_eps.unwrap_or(DEFAULT_TAIL_EPS);
    let horizon = (1.0 / tail).ln() / alpha;
    let steps = ((horizon / cfg.dt).ceil() as usize).max(1);
    let mut cfg_t = cfg.clone();
    cfg_t.steps = steps;

    let costs = fold_paths(
        model,
        None,
        x,
        cfg_t.steps,
        &cfg_t,
        || CostAccum::new(q, alpha, cfg_t.dt, None),
        |acc, ctx| acc.add_step(ctx.path, ctx.step, ctx.time, ctx.state, None),
        |acc, _x_end| Ok(acc.sum),
    )?;
    let l_inner: Vec<f64> = costs.iter().map(|j| inner * j).collect();
    let l_outer: Vec<f64> = costs.iter().map(|j| inner * power * j).collect();
    let lhs_log = log_mean_exp(&l_outer);
    let rhs_log = power * log_mean_exp(&l_inner);

    // SE of rhs − lhs = power·L(inner) − L(inner·power), paired samples.
    let se = paired_scaled_diff_se(&l_inner, power, &l_outer);
    let gap = rhs_log - lhs_log;
    let direction_ok = if (beta - 1.0).abs() < 1e-12 {
        gap.abs() <= 3.0 * se
    } else if beta < 1.0 {
        gap >= -3.0 * se
    } else {
        gap <= 3.0 * se
    };
    Ok(JensenGap {
        lhs_log,
        rhs_log,
        std_error: se,
        direction_ok,
        beta,
    })
}

/// SE of `c·lme(a) − lme(b)` for paired samples.
fn paired_scaled_diff_se(a: &[f64], c: f64, b: &[f64]) -> f64 {
    let k = a.len();
    let max_a = a.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let max_b = b.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mean_a: f64 = a.iter().map(|v| (v - max_a).exp()).sum::<f64>() / k as f64;
    let mean_b: f64 = b.iter().map(|v| (v - max_b).exp()).sum::<f64>() / k as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..k {
        let d = c * (a[i] - max_a).exp() / mean_a - (b[i] - max_b).exp() / mean_b;
        sum += d;
        sum_sq += d * d;
    }
    let kf = k as f64;
    let var = ((sum_sq - sum * sum / kf) / (kf - 1.0)).max(0.0);
    (var / kf).sqrt()
}

/// Residual of the stationary recurrence for a candidate stationary `z`.
#[derive(Clone, Debug)]
pub struct RecurrenceCheck {
    /// `(z(x) − e^{-AχT} E[exp(A∫q) z(X(T))]) / z(x)`.
    pub residual_rel: f64,
    /// Standard error of the residual.
    pub std_error: f64,
    pub ess: f64,
    pub n_samples: usize,
}

/// Evaluates how well `z_fn` satisfies the stationary fixed-point relation
///
/// ```text
/// z(x) = e^{-A χ T} · E_x[ exp(A ∫_0^T q dt) · z(X(T)) ]
/// ```
///
/// over uncontrolled dynamics, in the log domain. A candidate `(z, χ)` solving
/// the stationary problem drives the relative residual to zero.
pub fn recurrence_residual(
    model: &DiffusionModel,
    q: &StateCostFn,
    a_exp: f64,
    chi: f64,
    z_fn: &StateCostFn,
    horizon: f64,
    x: &State,
    cfg: &McConfig,
) -> Result<RecurrenceCheck, EstimatorError> {
    check_exponent(a_exp)?;
    let z_x = z_fn(x);
    if !(z_x > 0.0) || !z_x.is_finite() {
        return Err(EstimatorError::NonPositiveZ { value: z_x });
    }
    let cfg_t = cfg.for_horizon(horizon)?;
    let pairs = fold_paths(
        model,
        None,
        x,
        cfg_t.steps,
        &cfg_t,
        || CostAccum::new(q, 0.0, cfg_t.dt, None).require_nonneg(),
        |acc, ctx| acc.add_step(ctx.path, ctx.step, ctx.time, ctx.state, None),
        |acc, x_end| Ok((acc.sum, z_fn(x_end))),
    )?;
    let mut logw = Vec::with_capacity(pairs.len());
    for (j, z_end) in &pairs {
        if !(*z_end > 0.0) || !z_end.is_finite() {
            return Err(EstimatorError::NonPositiveZ { value: *z_end });
        }
        logw.push(a_exp * j + z_end.ln());
    }
    let stats = weight_stats(&logw);
    let log_c = -a_exp * chi * horizon;
    let ratio = (stats.lme + log_c - z_x.ln()).exp();
    let k = logw.len();
    Ok(RecurrenceCheck {
        residual_rel: 1.0 - ratio,
        std_error: ratio * stats.se_lme,
        ess: stats.ess,
        n_samples: k,
    })
}

/// Per-path controlled costs
/// `J_i = Σ e^{-αt}(q + ½uᵀRu) dt + m(X(T))` under the given policy.
pub fn sample_policy_costs(
    model: &DiffusionModel,
    cost: &RiskCostModel,
    policy: &dyn ControlPolicy,
    x: &State,
    horizon: f64,
    cfg: &McConfig,
) -> Result<Vec<f64>, EstimatorError> {
    let cfg = cfg.for_horizon(horizon)?;
    let q = cost.state_cost();
    let r = cost.control_weight();
    let alpha = cost.discount();
    let terminal = cost.terminal_cost();
    let costs = fold_paths(
        model,
        Some(policy),
        x,
        cfg.steps,
        &cfg,
        || CostAccum::new(q, alpha, cfg.dt, Some(r)).require_nonneg(),
        |acc, ctx| acc.add_step(ctx.path, ctx.step, ctx.time, ctx.state, ctx.control),
        |acc, x_end| acc.finish(0, x_end, terminal),
    )?;
    Ok(costs)
}

/// Risk-sensitive evaluation of an explicit feedback policy:
///
/// ```text
/// V̂^u(φ) = (1/φ) log E^u[ exp(φ J^u) ]        (φ ≠ 0)
///          = E^u[ J^u ]                          (φ = 0)
/// ```
///
/// with `J^u` including state cost, quadratic control cost, the discount
/// when the cost model carries one, and the terminal cost if present.
pub fn estimate_value_under_policy(
    model: &DiffusionModel,
    cost: &RiskCostModel,
    phi: f64,
    policy: &dyn ControlPolicy,
    x: &State,
    horizon: f64,
    cfg: &McConfig,
) -> Result<ValueEstimate, EstimatorError> {
    if !phi.is_finite() {
        return Err(EstimatorError::InvalidArgument("phi must be finite".into()));
    }
    let costs = sample_policy_costs(model, cost, policy, x, horizon, cfg)?;
    let k = costs.len();
    if phi == 0.0 {
        let mean = costs.iter().sum::<f64>() / k as f64;
        let var = costs.iter().map(|j| (j - mean) * (j - mean)).sum::<f64>() / (k as f64 - 1.0);
        return Ok(ValueEstimate {
            value: mean,
            std_error: (var / k as f64).sqrt(),
            ess: k as f64,
            n_samples: k,
            exponent: 0.0,
            low_ess: false,
        });
    }
    let logw: Vec<f64> = costs.iter().map(|j| phi * j).collect();
    Ok(ValueEstimate::from_log_weights(&logw, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::FnPolicy;
    use nalgebra::DVector;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar_cfg(paths: usize, dt: f64, steps: usize, seed: u64) -> McConfig {
        McConfig::new(paths, dt, steps, seed).unwrap()
    }

    fn x1(v: f64) -> State {
        DVector::from_element(1, v)
    }

    #[test]
    fn log_mean_exp_examples() {
        assert_relative_eq!(log_mean_exp(&[2.0, 2.0, 2.0]), 2.0, epsilon = 1e-15);
        assert_relative_eq!(
            log_mean_exp(&[0.0, f64::NEG_INFINITY]),
            0.5_f64.ln(),
            epsilon = 1e-15
        );
        assert_eq!(log_mean_exp(&[1000.0, 1000.0]), 1000.0);
        assert_eq!(
            log_mean_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn fh_value_zero_cost_is_zero() {
        let model = DiffusionModel::scalar_ou();
        let cost = RiskCostModel::quadratic(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            None,
            0.0,
        )
        .unwrap();
        let params = RiskParams::new(0.5, 1.0).unwrap();
        let est = estimate_fh_value(
            &model,
            &cost,
            &params,
            &x1(1.0),
            0.5,
            &scalar_cfg(128, 0.01, 50, 3),
        )
        .unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.ess, 128.0);
        assert!(!est.low_ess);
    }

    #[test]
    fn chi_constant_cost_is_exact() {
        let model = DiffusionModel::scalar_ou();
        let c = 1.7;
        let q = move |_x: &State| c;
        let est = estimate_chi(
            &model,
            &q,
            -0.5,
            2.0,
            4.0,
            &x1(0.0),
            &scalar_cfg(64, 0.01, 400, 5),
        )
        .unwrap();
        assert_relative_eq!(est.value, c, max_relative = 1e-12);
    }

    #[test]
    fn diff_value_same_state_is_exactly_zero() {
        let model = DiffusionModel::scalar_ou();
        let q = |x: &State| 0.5 * x[0] * x[0];
        let est = estimate_diff_value(
            &model,
            &q,
            -0.5,
            &x1(1.0),
            &x1(1.0),
            1.0,
            &scalar_cfg(256, 0.01, 100, 9),
        )
        .unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn diff_value_antisymmetric_under_crn() {
        let model = DiffusionModel::scalar_ou();
        let q = |x: &State| 0.5 * x[0] * x[0];
        let cfg = scalar_cfg(512, 0.01, 100, 11);
        let fwd =
            estimate_diff_value(&model, &q, -0.5, &x1(1.0), &x1(0.0), 1.0, &cfg).unwrap();
        let bwd =
            estimate_diff_value(&model, &q, -0.5, &x1(0.0), &x1(1.0), 1.0, &cfg).unwrap();
        assert_eq!(fwd.value, -bwd.value);
    }

    #[test]
    fn discounted_constant_cost_hits_c_over_alpha() {
        let model = DiffusionModel::scalar_ou();
        let c = 2.0;
        let alpha = 0.2;
        let q = move |_x: &State| c;
        let out = estimate_discounted_lower_bound(
            &model,
            &q,
            -0.5,
            alpha,
            &x1(0.0),
            &scalar_cfg(32, 0.01, 10, 1),
            None,
        )
        .unwrap();
        // deterministic: c/alpha up to truncation tail and O(dt) quadrature
        assert_relative_eq!(out.estimate.value, c / alpha, max_relative = 2e-3);
        assert!(out.truncation_horizon >= (1.0 / DEFAULT_TAIL_EPS).ln() / alpha);
        assert_relative_eq!(out.tail_bound, DEFAULT_TAIL_EPS * c / alpha, max_relative = 1e-12);
        assert_eq!(out.estimate.std_error, 0.0);
    }

    #[test]
    fn discounted_zero_cost_is_zero() {
        let model = DiffusionModel::scalar_ou();
        let out = estimate_discounted_lower_bound(
            &model,
            &|_x| 0.0,
            -1.0,
            0.5,
            &x1(1.0),
            &scalar_cfg(16, 0.01, 10, 1),
            None,
        )
        .unwrap();
        assert_eq!(out.estimate.value, 0.0);
        assert_eq!(out.tail_bound, 0.0);
    }

    #[test]
    fn jensen_equality_at_beta_one_is_exact() {
        let model = DiffusionModel::scalar_ou();
        let q = |x: &State| 0.5 * x[0] * x[0];
        let gap = jensen_gap(
            &model,
            &q,
            -0.5,
            0.2,
            1.0,
            1.0,
            &x1(1.0),
            &scalar_cfg(512, 0.02, 10, 21),
            None,
        )
        .unwrap();
        assert_eq!(gap.lhs_log, gap.rhs_log);
        assert!(gap.direction_ok);
    }

    #[test]
    fn jensen_directions_hold_under_shared_noise() {
        let model = DiffusionModel::scalar_ou();
        let q = |x: &State| 0.5 * x[0] * x[0];
        let cfg = scalar_cfg(2000, 0.02, 10, 33);
        for beta in [0.5, 2.0] {
            let gap =
                jensen_gap(&model, &q, -0.5, 0.2, 1.0, beta, &x1(1.0), &cfg, None).unwrap();
            assert!(gap.direction_ok, "direction failed for beta = {beta}");
        }
        // beta < 1: lhs <= rhs must hold samplewise (power-mean inequality)
        let g = jensen_gap(&model, &q, -0.5, 0.2, 1.0, 0.5, &x1(1.0), &cfg, None).unwrap();
        assert!(g.lhs_log <= g.rhs_log);
        let g = jensen_gap(&model, &q, -0.5, 0.2, 1.0, 2.0, &x1(1.0), &cfg, None).unwrap();
        assert!(g.lhs_log >= g.rhs_log);
    }

    #[test]
    fn recurrence_constant_cost_is_exact() {
        let model = DiffusionModel::scalar_ou();
        let chi = 0.8;
        let q = move |_x: &State| chi;
        let z = |_x: &State| 1.0;
        let check = recurrence_residual(
            &model,
            &q,
            -0.5,
            chi,
            &z,
            0.5,
            &x1(1.0),
            &scalar_cfg(64, 0.01, 50, 7),
        )
        .unwrap();
        assert!(check.residual_rel.abs() <= 1e-9, "residual {}", check.residual_rel);
    }

    #[test]
    fn policy_value_zero_cost_zero_policy() {
        let model = DiffusionModel::scalar_ou();
        let cost = RiskCostModel::quadratic(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            None,
            0.0,
        )
        .unwrap();
        let zero = FnPolicy(|_t: f64, _x: &State| DVector::zeros(1));
        for phi in [-0.5, 0.0, 0.7] {
            let est = estimate_value_under_policy(
                &model,
                &cost,
                phi,
                &zero,
                &x1(1.0),
                0.5,
                &scalar_cfg(64, 0.01, 50, 3),
            )
            .unwrap();
            assert_eq!(est.value, 0.0);
        }
    }

    #[test]
    fn degenerate_exponent_rejected() {
        let model = DiffusionModel::scalar_ou();
        let q = |x: &State| 0.5 * x[0] * x[0];
        let err = estimate_chi(
            &model,
            &q,
            0.0,
            1.0,
            2.0,
            &x1(0.0),
            &scalar_cfg(16, 0.01, 200, 1),
        )
        .unwrap_err();
        assert!(matches!(err, EstimatorError::DegenerateExponent { .. }));
    }

    #[test]
    fn negative_cost_rejected_in_average_setting() {
        let model = DiffusionModel::scalar_ou();
        let q = |x: &State| x[0]; // signed
        let err = estimate_chi(
            &model,
            &q,
            -0.5,
            1.0,
            2.0,
            &x1(-1.0),
            &scalar_cfg(16, 0.01, 200, 1),
        )
        .unwrap_err();
        assert!(matches!(err, EstimatorError::Sim(SimError::NegativeCost { .. })));
    }

    #[test]
    fn risk_neutral_continuity_of_policy_value() {
        let model = DiffusionModel::scalar_ou();
        let cost = RiskCostModel::scalar_ou(0.0);
        let s = 2.0_f64.sqrt() - 1.0;
        let fb = FnPolicy(move |_t: f64, x: &State| DVector::from_element(1, -s * x[0]));
        let cfg = scalar_cfg(20_000, 0.01, 100, 13);
        let v0 = estimate_value_under_policy(&model, &cost, 0.0, &fb, &x1(1.0), 1.0, &cfg)
            .unwrap();
        let veps =
            estimate_value_under_policy(&model, &cost, 1e-6, &fb, &x1(1.0), 1.0, &cfg).unwrap();
        assert!((veps.value - v0.value).abs() <= 1e-3 * (1.0 + v0.value.abs()));
    }
}
