//! Controlled Itô diffusions and reproducible Monte Carlo trajectory batches.
//!
//! The process model is
//!
//! ```text
//! dX = (a(X) + B(X) u) dt + σ dW,    X(0) = x0
//! ```
//!
//! with time-invariant drift `a`, control matrix `B`, and a constant
//! full-rank noise matrix `σ` (so `Σ = σσᵀ` is positive definite).
//! Integration is explicit Euler–Maruyama with a fixed step:
//!
//! ```text
//! X_{k+1} = X_k + (a(X_k) + B(X_k) u_k) dt + σ √dt ξ_k,   ξ_k ~ N(0, I_p)
//! ```
//!
//! Cost integrals use the matching left-endpoint Riemann sum. Path `k`
//! draws its noise from a dedicated stream keyed by `(seed, k)`, so batches
//! are bit-reproducible for any worker count, and a controlled batch shares
//! its noise increments with the uncontrolled batch of the same seed
//! (common random numbers).

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

use crate::rng::path_rng;

/// State vector in `R^n`.
pub type State = DVector<f64>;
/// Control vector in `R^m`.
pub type Control = DVector<f64>;

/// Drift evaluation `a(x)`, written into `out` (length n).
pub type DriftFn = Arc<dyn Fn(&State, &mut DVector<f64>) + Send + Sync>;
/// Control-matrix evaluation `B(x)`, written into `out` (n×m).
pub type ControlMatrixFn = Arc<dyn Fn(&State, &mut DMatrix<f64>) + Send + Sync>;
/// Scalar state-cost rate `q(x)`.
pub type StateCostFn = dyn Fn(&State) -> f64 + Send + Sync;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("noise covariance sigma*sigma^T is not positive definite")]
    NoiseNotPositiveDefinite,
    #[error("invalid Monte Carlo configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "path {path} diverged at step {step} (t = {time:.6}): {what} \
         (bound {bound:.3e})"
    )]
    Divergence {
        path: usize,
        step: usize,
        time: f64,
        what: String,
        bound: f64,
    },
    #[error("cost rate returned a non-finite value at path {path}, step {step}")]
    NonFiniteCost { path: usize, step: usize },
    #[error("cost rate returned {value} < 0 at path {path}, step {step}; this setting requires q >= 0")]
    NegativeCost { path: usize, step: usize, value: f64 },
    #[error("policy failed at t = {time:.6}: {reason}")]
    PolicyFailure { time: f64, reason: String },
}

/// Feedback policy `u = u(t, x)` queried once per step during controlled
/// simulation. Implementations must be safe for concurrent queries.
pub trait ControlPolicy: Sync {
    fn control(&self, t: f64, x: &State) -> Result<Control, String>;
}

/// Wraps a plain closure as a [`ControlPolicy`].
pub struct FnPolicy<F>(pub F);

impl<F> ControlPolicy for FnPolicy<F>
where
    F: Fn(f64, &State) -> Control + Sync,
{
    fn control(&self, t: f64, x: &State) -> Result<Control, String> {
        Ok((self.0)(t, x))
    }
}

/// Controlled Itô diffusion with constant noise matrix.
#[derive(Clone)]
pub struct DiffusionModel {
    state_dim: usize,
    control_dim: usize,
    noise_dim: usize,
    drift: DriftFn,
    control_matrix: ControlMatrixFn,
    sigma: DMatrix<f64>,
    sigma_cov: DMatrix<f64>,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("noise_dim", &self.noise_dim)
            .finish_non_exhaustive()
    }
}

impl DiffusionModel {
    /// Builds a model from drift and control-matrix callbacks and a constant
    /// `n×p` noise matrix. Fails if `σσᵀ` is not positive definite.
    pub fn new(
        control_dim: usize,
        drift: DriftFn,
        control_matrix: ControlMatrixFn,
        sigma: DMatrix<f64>,
    ) -> Result<Self, SimError> {
        let state_dim = sigma.nrows();
        let noise_dim = sigma.ncols();
        if state_dim == 0 {
            return Err(SimError::Dimension("state dimension must be positive".into()));
        }
        let sigma_cov = &sigma * sigma.transpose();
        if nalgebra::linalg::Cholesky::new(sigma_cov.clone()).is_none() {
            return Err(SimError::NoiseNotPositiveDefinite);
        }
        Ok(Self {
            state_dim,
            control_dim,
            noise_dim,
            drift,
            control_matrix,
            sigma,
            sigma_cov,
        })
    }

    /// Linear dynamics `dX = (A x + B u) dt + σ dW`.
    pub fn linear(
        a_dyn: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
    ) -> Result<Self, SimError> {
        let n = sigma.nrows();
        if a_dyn.nrows() != n || a_dyn.ncols() != n {
            return Err(SimError::Dimension(format!(
                "drift matrix must be {n}x{n}, got {}x{}",
                a_dyn.nrows(),
                a_dyn.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(SimError::Dimension(format!(
                "control matrix must have {n} rows, got {}",
                b.nrows()
            )));
        }
        let m = b.ncols();
        let a = a_dyn;
        let bm = b;
        Self::new(
            m,
            Arc::new(move |x, out| out.gemv(1.0, &a, x, 0.0)),
            Arc::new(move |_x, out| out.copy_from(&bm)),
            sigma,
        )
    }

    /// The scalar benchmark system `dX = -X dt + dW` with `B = 1`.
    pub fn scalar_ou() -> Self {
        Self::linear(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .expect("scalar OU model is well formed")
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Noise covariance `Σ = σσᵀ`.
    pub fn sigma_cov(&self) -> &DMatrix<f64> {
        &self.sigma_cov
    }

    /// Evaluates the drift into a caller buffer.
    pub fn drift_into(&self, x: &State, out: &mut DVector<f64>) {
        (self.drift)(x, out);
    }

    /// Evaluates the control matrix into a caller buffer.
    pub fn control_matrix_into(&self, x: &State, out: &mut DMatrix<f64>) {
        (self.control_matrix)(x, out);
    }
}

/// Monte Carlo sampling configuration.
///
/// `steps * dt` is the batch horizon. Estimators that take an explicit
/// horizon argument re-derive the step count from `dt`, keeping the same
/// paths/seed/guards.
#[derive(Clone, Debug)]
pub struct McConfig {
    pub paths: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub worker_hint: Option<usize>,
    pub divergence_bound: f64,
}

impl McConfig {
    pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

    pub fn new(paths: usize, dt: f64, steps: usize, seed: u64) -> Result<Self, SimError> {
        if paths < 2 {
            return Err(SimError::InvalidConfig(
                "at least two paths are required for standard errors".into(),
            ));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SimError::InvalidConfig("dt must be positive and finite".into()));
        }
        if steps == 0 {
            return Err(SimError::InvalidConfig("steps must be positive".into()));
        }
        Ok(Self {
            paths,
            dt,
            steps,
            seed,
            worker_hint: None,
            divergence_bound: Self::DEFAULT_DIVERGENCE_BOUND,
        })
    }

    /// Builds a configuration for a requested horizon, requiring
    /// `steps * dt` to reproduce it to one part in 1e9.
    pub fn with_horizon(paths: usize, dt: f64, horizon: f64, seed: u64) -> Result<Self, SimError> {
        let steps = Self::steps_for_horizon(dt, horizon)?;
        Self::new(paths, dt, steps, seed)
    }

    pub fn with_worker_hint(mut self, hint: Option<usize>) -> Self {
        self.worker_hint = hint;
        self
    }

    pub fn with_divergence_bound(mut self, bound: f64) -> Self {
        self.divergence_bound = bound;
        self
    }

    /// Horizon spanned by this configuration.
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Step count reproducing `horizon` at step `dt` to one part in 1e9.
    pub fn steps_for_horizon(dt: f64, horizon: f64) -> Result<usize, SimError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SimError::InvalidConfig("horizon must be positive and finite".into()));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 {
            return Err(SimError::InvalidConfig(format!(
                "horizon {horizon} is shorter than one step dt = {dt}"
            )));
        }
        if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(SimError::InvalidConfig(format!(
                "horizon {horizon} is not an integer multiple of dt = {dt}"
            )));
        }
        Ok(steps as usize)
    }

    /// Copy of this configuration re-targeted at a different horizon.
    pub fn for_horizon(&self, horizon: f64) -> Result<Self, SimError> {
        let steps = Self::steps_for_horizon(self.dt, horizon)?;
        let mut cfg = self.clone();
        cfg.steps = steps;
        Ok(cfg)
    }
}

/// A batch of `K` simulated paths on the uniform grid `t_k = k dt`.
///
/// Stores every state, the √dt-scaled noise increments, and (for controlled
/// simulation) the applied controls. Regenerating with the same model,
/// initial state and configuration reproduces the batch exactly.
pub struct TrajectoryBatch {
    times: Vec<f64>,
    state_dim: usize,
    noise_dim: usize,
    control_dim: usize,
    paths: usize,
    steps: usize,
    /// `paths × (steps+1) × state_dim`, path-major.
    states: Vec<f64>,
    /// `paths × steps × noise_dim`, path-major.
    noise: Vec<f64>,
    /// `paths × steps × control_dim`, present only for controlled batches.
    controls: Option<Vec<f64>>,
}

impl std::fmt::Debug for TrajectoryBatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrajectoryBatch")
            .field("paths", &self.paths)
            .field("steps", &self.steps)
            .field("state_dim", &self.state_dim)
            .field("controlled", &self.controls.is_some())
            .finish_non_exhaustive()
    }
}

impl TrajectoryBatch {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() >= 2 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// State of path `k` at grid node `i` as a slice of length `state_dim`.
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let row = (self.steps + 1) * self.state_dim;
        let base = path * row + node * self.state_dim;
        &self.states[base..base + self.state_dim]
    }

    pub fn final_state(&self, path: usize) -> &[f64] {
        self.state(path, self.steps)
    }

    /// Noise increment `σ-free` draw `ΔW_k = √dt ξ_k` of path `k` at step `i`.
    pub fn noise_increment(&self, path: usize, step: usize) -> &[f64] {
        let row = self.steps * self.noise_dim;
        let base = path * row + step * self.noise_dim;
        &self.noise[base..base + self.noise_dim]
    }

    /// Control applied by path `k` at step `i`, if this batch was controlled.
    pub fn control(&self, path: usize, step: usize) -> Option<&[f64]> {
        self.controls.as_ref().map(|c| {
            let row = self.steps * self.control_dim;
            let base = path * row + step * self.control_dim;
            &c[base..base + self.control_dim]
        })
    }

    pub fn has_controls(&self) -> bool {
        self.controls.is_some()
    }

    #[cfg(test)]
    pub(crate) fn from_raw_states(times: Vec<f64>, state_dim: usize, paths: usize, states: Vec<f64>) -> Self {
        let steps = times.len() - 1;
        assert_eq!(states.len(), paths * (steps + 1) * state_dim);
        Self {
            times,
            state_dim,
            noise_dim: 0,
            control_dim: 0,
            paths,
            steps,
            states,
            noise: Vec::new(),
            controls: None,
        }
    }
}

/// Context handed to per-step observers. `state` and `control` are the
/// pre-update values `X_k`, `u_k`; `noise` is the increment about to be
/// applied.
pub(crate) struct StepCtx<'a> {
    pub path: usize,
    pub step: usize,
    pub time: f64,
    pub state: &'a State,
    pub control: Option<&'a Control>,
    pub noise: &'a DVector<f64>,
}

struct PathBuffers {
    x: State,
    drift: DVector<f64>,
    bmat: DMatrix<f64>,
    bu: DVector<f64>,
    xi: DVector<f64>,
    sdw: DVector<f64>,
}

impl PathBuffers {
    fn new(n: usize, m: usize, p: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            drift: DVector::zeros(n),
            bmat: DMatrix::zeros(n, m),
            bu: DVector::zeros(n),
            xi: DVector::zeros(p),
            sdw: DVector::zeros(n),
        }
    }
}

/// Integrates one path, invoking `observe` once per step with the
/// pre-update state. Returns the final state `X_N`.
fn run_path<O>(
    model: &DiffusionModel,
    policy: Option<&dyn ControlPolicy>,
    x0: &State,
    steps: usize,
    dt: f64,
    bound: f64,
    path: usize,
    seed: u64,
    buf: &mut PathBuffers,
    mut observe: O,
) -> Result<State, SimError>
where
    O: FnMut(&StepCtx<'_>) -> Result<(), SimError>,
{
    let mut rng = path_rng(seed, path as u64);
    let sqrt_dt = dt.sqrt();
    buf.x.copy_from(x0);
    for step in 0..steps {
        let t = step as f64 * dt;
        for j in 0..model.noise_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            buf.xi[j] = sqrt_dt * z;
        }
        let u = match policy {
            Some(p) => {
                let u = p
                    .control(t, &buf.x)
                    .map_err(|reason| SimError::PolicyFailure { time: t, reason })?;
                if u.len() != model.control_dim {
                    return Err(SimError::Dimension(format!(
                        "policy returned control of length {}, expected {}",
                        u.len(),
                        model.control_dim
                    )));
                }
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::Divergence {
                        path,
                        step,
                        time: t,
                        what: "policy returned a non-finite control".into(),
                        bound,
                    });
                }
                Some(u)
            }
            None => None,
        };
        observe(&StepCtx {
            path,
            step,
            time: t,
            state: &buf.x,
            control: u.as_ref(),
            noise: &buf.xi,
        })?;

        model.drift_into(&buf.x, &mut buf.drift);
        if let Some(u) = &u {
            model.control_matrix_into(&buf.x, &mut buf.bmat);
            buf.bu.gemv(1.0, &buf.bmat, u, 0.0);
        }
        buf.x.axpy(dt, &buf.drift, 1.0);
        if u.is_some() {
            buf.x.axpy(dt, &buf.bu, 1.0);
        }
        buf.sdw.gemv(1.0, &model.sigma, &buf.xi, 0.0);
        buf.x += &buf.sdw;

        for v in buf.x.iter() {
            if !v.is_finite() || v.abs() > bound {
                return Err(SimError::Divergence {
                    path,
                    step,
                    time: t,
                    what: format!("state component reached {v}"),
                    bound,
                });
            }
        }
    }
    Ok(buf.x.clone())
}

/// Runs `f` inside a dedicated rayon pool when a worker hint is set; results
/// do not depend on the pool size.
fn with_pool<T: Send>(hint: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match hint {
        Some(threads) if threads > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build worker pool")
            .install(f),
        _ => f(),
    }
}

/// Streams all paths in parallel, folding each into an accumulator and a
/// per-path output. Outputs are returned in path order, so downstream
/// reductions are deterministic for any worker count.
pub(crate) fn fold_paths<A, Out, I, S, F>(
    model: &DiffusionModel,
    policy: Option<&dyn ControlPolicy>,
    x0: &State,
    steps: usize,
    cfg: &McConfig,
    init: I,
    on_step: S,
    finish: F,
) -> Result<Vec<Out>, SimError>
where
    I: Fn() -> A + Sync,
    S: Fn(&mut A, &StepCtx<'_>) -> Result<(), SimError> + Sync,
    F: Fn(A, &State) -> Result<Out, SimError> + Sync,
    A: Send,
    Out: Send,
{
    check_initial_state(model, x0)?;
    let n = model.state_dim;
    let m = model.control_dim;
    let p = model.noise_dim;
    with_pool(cfg.worker_hint, || {
        (0..cfg.paths)
            .into_par_iter()
            .map(|path| {
                let mut buf = PathBuffers::new(n, m, p);
                let mut acc = init();
                let x_end = run_path(
                    model,
                    policy,
                    x0,
                    steps,
                    cfg.dt,
                    cfg.divergence_bound,
                    path,
                    cfg.seed,
                    &mut buf,
                    |ctx| on_step(&mut acc, ctx),
                )?;
                finish(acc, &x_end)
            })
            .collect()
    })
}

fn check_initial_state(model: &DiffusionModel, x0: &State) -> Result<(), SimError> {
    if x0.len() != model.state_dim {
        return Err(SimError::Dimension(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            model.state_dim
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Dimension("initial state must be finite".into()));
    }
    Ok(())
}

fn simulate(
    model: &DiffusionModel,
    policy: Option<&dyn ControlPolicy>,
    x0: &State,
    cfg: &McConfig,
) -> Result<TrajectoryBatch, SimError> {
    check_initial_state(model, x0)?;
    let n = model.state_dim;
    let m = model.control_dim;
    let p = model.noise_dim;
    let k = cfg.paths;
    let steps = cfg.steps;

    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * cfg.dt).collect();
    let mut states = vec![0.0; k * (steps + 1) * n];
    let mut noise = vec![0.0; k * steps * p];
    let mut controls = policy.map(|_| vec![0.0; k * steps * m]);

    let state_row = (steps + 1) * n;
    let noise_row = steps * p;
    let control_row = steps * m;

    with_pool(cfg.worker_hint, || {
        let state_chunks = states.par_chunks_mut(state_row);
        let noise_chunks = noise.par_chunks_mut(noise_row);
        match controls.as_mut() {
            Some(ctrl) => state_chunks
                .zip(noise_chunks)
                .zip(ctrl.par_chunks_mut(control_row))
                .enumerate()
                .try_for_each(|(path, ((srow, nrow), crow))| {
                    let mut buf = PathBuffers::new(n, m, p);
                    let x_end = run_path(
                        model,
                        policy,
                        x0,
                        steps,
                        cfg.dt,
                        cfg.divergence_bound,
                        path,
                        cfg.seed,
                        &mut buf,
                        |ctx| {
                            let s = ctx.step;
                            srow[s * n..(s + 1) * n].copy_from_slice(ctx.state.as_slice());
                            nrow[s * p..(s + 1) * p].copy_from_slice(ctx.noise.as_slice());
                            let u = ctx.control.expect("controlled simulation records controls");
                            crow[s * m..(s + 1) * m].copy_from_slice(u.as_slice());
                            Ok(())
                        },
                    )?;
                    srow[steps * n..].copy_from_slice(x_end.as_slice());
                    Ok::<(), SimError>(())
                }),
            None => state_chunks
                .zip(noise_chunks)
                .enumerate()
                .try_for_each(|(path, (srow, nrow))| {
                    let mut buf = PathBuffers::new(n, m, p);
                    let x_end = run_path(
                        model,
                        None,
                        x0,
                        steps,
                        cfg.dt,
                        cfg.divergence_bound,
                        path,
                        cfg.seed,
                        &mut buf,
                        |ctx| {
                            let s = ctx.step;
                            srow[s * n..(s + 1) * n].copy_from_slice(ctx.state.as_slice());
                            nrow[s * p..(s + 1) * p].copy_from_slice(ctx.noise.as_slice());
                            Ok(())
                        },
                    )?;
                    srow[steps * n..].copy_from_slice(x_end.as_slice());
                    Ok::<(), SimError>(())
                }),
        }
    })?;

    Ok(TrajectoryBatch {
        times,
        state_dim: n,
        noise_dim: p,
        control_dim: m,
        paths: k,
        steps,
        states,
        noise,
        controls,
    })
}

/// Simulates the uncontrolled process `dX = a(X) dt + σ dW`.
pub fn simulate_uncontrolled(
    model: &DiffusionModel,
    x0: &State,
    cfg: &McConfig,
) -> Result<TrajectoryBatch, SimError> {
    simulate(model, None, x0, cfg)
}

/// Simulates the controlled process with `u_k = policy(t_k, X_k)`. With the
/// same seed, the noise increments equal those of [`simulate_uncontrolled`].
pub fn simulate_controlled(
    model: &DiffusionModel,
    policy: &dyn ControlPolicy,
    x0: &State,
    cfg: &McConfig,
) -> Result<TrajectoryBatch, SimError> {
    simulate(model, Some(policy), x0, cfg)
}

/// Left-endpoint discounted cost accumulator shared by batch integration and
/// the streaming estimators, so both produce identical floating-point sums.
pub(crate) struct CostAccum<'a> {
    q: &'a StateCostFn,
    alpha: f64,
    dt: f64,
    control_weight: Option<&'a DMatrix<f64>>,
    require_nonneg: bool,
    ru: DVector<f64>,
    pub sum: f64,
}

impl<'a> CostAccum<'a> {
    pub fn new(q: &'a StateCostFn, alpha: f64, dt: f64, control_weight: Option<&'a DMatrix<f64>>) -> Self {
        let m = control_weight.map_or(0, |r| r.ncols());
        Self {
            q,
            alpha,
            dt,
            control_weight,
            require_nonneg: false,
            ru: DVector::zeros(m),
            sum: 0.0,
        }
    }

    /// Reject negative state-cost rates (the average-cost setting needs
    /// `q >= 0`).
    pub fn require_nonneg(mut self) -> Self {
        self.require_nonneg = true;
        self
    }

    #[inline]
    pub fn discount(&self, t: f64) -> f64 {
        if self.alpha == 0.0 {
            1.0
        } else {
            (-self.alpha * t).exp()
        }
    }

    pub fn add_step(
        &mut self,
        path: usize,
        step: usize,
        t: f64,
        x: &State,
        u: Option<&Control>,
    ) -> Result<(), SimError> {
        let qv = (self.q)(x);
        if !qv.is_finite() {
            return Err(SimError::NonFiniteCost { path, step });
        }
        if self.require_nonneg && qv < 0.0 {
            return Err(SimError::NegativeCost { path, step, value: qv });
        }
        let disc = self.discount(t);
        let mut rate = qv;
        if let (Some(r), Some(u)) = (self.control_weight, u) {
            self.ru.gemv(1.0, r, u, 0.0);
            rate += 0.5 * u.dot(&self.ru);
        }
        self.sum += disc * rate * self.dt;
        Ok(())
    }

    pub fn finish(
        self,
        path: usize,
        x_end: &State,
        terminal: Option<&StateCostFn>,
    ) -> Result<f64, SimError> {
        let mut total = self.sum;
        if let Some(m) = terminal {
            let mv = m(x_end);
            if !mv.is_finite() {
                return Err(SimError::NonFiniteCost {
                    path,
                    step: usize::MAX,
                });
            }
            total += mv;
        }
        Ok(total)
    }
}

/// Per-path cost integrals over a stored batch:
///
/// ```text
/// J_k = Σ_i e^{-α t_i} (q(X_i) + ½ u_iᵀ R u_i) dt  +  m(X_N)
/// ```
///
/// The control-cost term requires both recorded controls and a weight matrix
/// `control_weight`; for uncontrolled batches pass `None`.
pub fn path_cost_integral(
    batch: &TrajectoryBatch,
    q: &StateCostFn,
    alpha: f64,
    terminal: Option<&StateCostFn>,
    control_weight: Option<&DMatrix<f64>>,
) -> Result<Vec<f64>, SimError> {
    if alpha < 0.0 {
        return Err(SimError::InvalidConfig("discount must be nonnegative".into()));
    }
    if control_weight.is_some() && !batch.has_controls() {
        return Err(SimError::InvalidConfig(
            "control weight supplied but the batch records no controls".into(),
        ));
    }
    let n = batch.state_dim;
    let m = batch.control_dim;
    let dt = batch.dt();
    (0..batch.paths)
        .into_par_iter()
        .map(|path| {
            let mut acc = CostAccum::new(q, alpha, dt, control_weight);
            let mut x = DVector::zeros(n);
            let mut u = DVector::zeros(m);
            for step in 0..batch.steps {
                x.as_mut_slice().copy_from_slice(batch.state(path, step));
                let uref = match (control_weight, batch.control(path, step)) {
                    (Some(_), Some(us)) => {
                        u.as_mut_slice().copy_from_slice(us);
                        Some(&u)
                    }
                    _ => None,
                };
                acc.add_step(path, step, batch.times[step], &x, uref)?;
            }
            x.as_mut_slice().copy_from_slice(batch.final_state(path));
            acc.finish(path, &x, terminal)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn variance(v: &[f64]) -> f64 {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    }

    fn brownian() -> DiffusionModel {
        DiffusionModel::new(
            0,
            Arc::new(|_x, out: &mut DVector<f64>| out.fill(0.0)),
            Arc::new(|_x, _out: &mut DMatrix<f64>| {}),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn brownian_motion_moments() {
        let k = 100_000;
        let cfg = McConfig::new(k, 0.01, 100, 11).unwrap();
        let batch = simulate_uncontrolled(&brownian(), &DVector::zeros(1), &cfg).unwrap();
        let finals: Vec<f64> = (0..k).map(|p| batch.final_state(p)[0]).collect();
        let t = cfg.horizon();
        let m = mean(&finals);
        assert!(
            m.abs() < 3.0 / (k as f64).sqrt(),
            "Brownian mean {m} outside 3/sqrt(K)"
        );
        let v = variance(&finals);
        assert!((v - t).abs() < 0.1 * t, "Brownian variance {v} vs {t}");
    }

    #[test]
    fn degenerate_noise_rejected() {
        let err = DiffusionModel::linear(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, SimError::NoiseNotPositiveDefinite));
    }

    #[test]
    fn ou_mean_matches_closed_form() {
        // dX = -X dt + dW from x0 = 2: E X(T) = 2 e^{-T}.
        let model = DiffusionModel::scalar_ou();
        let k = 100_000;
        let cfg = McConfig::new(k, 1e-3, 2000, 5).unwrap();
        let x0 = DVector::from_element(1, 2.0);
        let finals = fold_paths(
            &model,
            None,
            &x0,
            cfg.steps,
            &cfg,
            || (),
            |_, _| Ok(()),
            |_, x_end| Ok(x_end[0]),
        )
        .unwrap();
        let m = mean(&finals);
        let sd = variance(&finals).sqrt();
        let target = 2.0 * (-cfg.horizon()).exp();
        assert!(
            (m - target).abs() < 3.0 * sd / (k as f64).sqrt(),
            "OU mean {m} vs {target}"
        );
    }

    #[test]
    fn ou_mean_matches_closed_form_batch() {
        let model = DiffusionModel::scalar_ou();
        let k = 5_000;
        let cfg = McConfig::new(k, 1e-3, 2000, 5).unwrap();
        let batch =
            simulate_uncontrolled(&model, &DVector::from_element(1, 2.0), &cfg).unwrap();
        let finals: Vec<f64> = (0..k).map(|p| batch.final_state(p)[0]).collect();
        let m = mean(&finals);
        let sd = variance(&finals).sqrt();
        let target = 2.0 * (-cfg.horizon()).exp();
        assert!(
            (m - target).abs() < 3.0 * sd / (k as f64).sqrt(),
            "OU mean {m} vs {target}"
        );
    }

    #[test]
    fn zero_policy_reproduces_uncontrolled() {
        let model = DiffusionModel::scalar_ou();
        let cfg = McConfig::new(64, 0.01, 50, 123).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let free = simulate_uncontrolled(&model, &x0, &cfg).unwrap();
        let zero = FnPolicy(|_t: f64, _x: &State| DVector::zeros(1));
        let ctrl = simulate_controlled(&model, &zero, &x0, &cfg).unwrap();
        assert_eq!(free.states, ctrl.states);
        assert_eq!(free.noise, ctrl.noise);
    }

    #[test]
    fn controlled_stationary_variance() {
        // u = -S x with S = sqrt(2) - 1 closes the loop at rate 1 + S;
        // stationary variance is 1 / (2 (1 + S)).
        let model = DiffusionModel::scalar_ou();
        let s = 2.0_f64.sqrt() - 1.0;
        let policy = FnPolicy(move |_t: f64, x: &State| DVector::from_element(1, -s * x[0]));
        let k = 50_000;
        let cfg = McConfig::new(k, 2e-3, 5000, 77).unwrap();
        let finals = fold_paths(
            &model,
            Some(&policy),
            &DVector::zeros(1),
            cfg.steps,
            &cfg,
            || (),
            |_, _| Ok(()),
            |_, x_end| Ok(x_end[0]),
        )
        .unwrap();
        let v = variance(&finals);
        let target = 1.0 / (2.0 * (1.0 + s));
        assert!((v - target).abs() < 0.1 * target, "variance {v} vs {target}");
    }

    #[test]
    fn nan_policy_diverges_on_first_step() {
        let model = DiffusionModel::scalar_ou();
        let cfg = McConfig::new(4, 0.01, 10, 2).unwrap();
        let bad = FnPolicy(|_t: f64, _x: &State| DVector::from_element(1, f64::NAN));
        let err =
            simulate_controlled(&model, &bad, &DVector::zeros(1), &cfg).unwrap_err();
        match err {
            SimError::Divergence { step, .. } => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn seed_determinism_ignores_worker_hint() {
        let model = DiffusionModel::scalar_ou();
        let x0 = DVector::from_element(1, 0.5);
        let base = McConfig::new(256, 0.01, 40, 9).unwrap();
        let a = simulate_uncontrolled(&model, &x0, &base).unwrap();
        for hint in [1usize, 3, 8] {
            let cfg = base.clone().with_worker_hint(Some(hint));
            let b = simulate_uncontrolled(&model, &x0, &cfg).unwrap();
            assert_eq!(a.states, b.states);
            assert_eq!(a.noise, b.noise);
        }
    }

    #[test]
    fn crn_contract_shared_noise() {
        let model = DiffusionModel::scalar_ou();
        let cfg = McConfig::new(32, 0.01, 30, 4).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let free = simulate_uncontrolled(&model, &x0, &cfg).unwrap();
        let fb = FnPolicy(|_t: f64, x: &State| DVector::from_element(1, -0.3 * x[0]));
        let ctrl = simulate_controlled(&model, &fb, &x0, &cfg).unwrap();
        assert_eq!(free.noise, ctrl.noise);
        assert!(ctrl.has_controls());
    }

    #[test]
    fn zero_cost_gives_zero_vector() {
        let model = DiffusionModel::scalar_ou();
        let cfg = McConfig::new(16, 0.01, 20, 1).unwrap();
        let batch = simulate_uncontrolled(&model, &DVector::zeros(1), &cfg).unwrap();
        let costs = path_cost_integral(&batch, &|_x| 0.0, 0.0, None, None).unwrap();
        assert!(costs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn constant_cost_integrates_to_ct() {
        let model = DiffusionModel::scalar_ou();
        let cfg = McConfig::new(8, 0.01, 100, 1).unwrap();
        let batch = simulate_uncontrolled(&model, &DVector::zeros(1), &cfg).unwrap();
        let c = 3.5;
        let costs = path_cost_integral(&batch, &move |_x| c, 0.0, None, None).unwrap();
        let target = c * cfg.horizon();
        for j in costs {
            assert_relative_eq!(j, target, max_relative = 1e-12);
        }
    }

    #[test]
    fn discounted_constant_cost() {
        let model = DiffusionModel::scalar_ou();
        let alpha = 0.5;
        let cfg = McConfig::new(4, 1e-3, 20_000, 1).unwrap();
        let batch = simulate_uncontrolled(&model, &DVector::zeros(1), &cfg).unwrap();
        let c = 2.0;
        let costs = path_cost_integral(&batch, &move |_x| c, alpha, None, None).unwrap();
        let t = cfg.horizon();
        let target = c * (1.0 - (-alpha * t).exp()) / alpha;
        for j in costs {
            // Left-endpoint quadrature error is O(dt).
            assert!((j - target).abs() < 5.0 * c * alpha * cfg.dt * t);
        }
    }

    #[test]
    fn quadrature_halving_is_first_order() {
        // Deterministic path x(t) = e^{-t} on three grids; the left-endpoint
        // error against the closed-form integral of q = x^2 halves with dt.
        let horizon = 1.0;
        let exact = |alpha: f64| {
            // ∫ e^{-alpha t} e^{-2t} dt over [0,1]
            (1.0 - (-(2.0 + alpha) * horizon).exp()) / (2.0 + alpha)
        };
        let alpha = 0.3;
        let mut errors = Vec::new();
        for steps in [100usize, 200, 400] {
            let dt = horizon / steps as f64;
            let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
            let states: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
            let batch = TrajectoryBatch::from_raw_states(times, 1, 1, states);
            let j = path_cost_integral(&batch, &|x| x[0] * x[0], alpha, None, None).unwrap()[0];
            errors.push((j - exact(alpha)).abs());
        }
        let r1 = errors[0] / errors[1];
        let r2 = errors[1] / errors[2];
        assert!(r1 > 1.7 && r1 < 2.3, "halving ratio {r1}");
        assert!(r2 > 1.7 && r2 < 2.3, "halving ratio {r2}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = DiffusionModel::scalar_ou();
        let cfg = McConfig::new(4, 0.01, 5, 1).unwrap();
        let err = simulate_uncontrolled(&model, &DVector::zeros(2), &cfg).unwrap_err();
        assert!(matches!(err, SimError::Dimension(_)));
    }

    #[test]
    fn horizon_consistency_enforced() {
        assert!(McConfig::with_horizon(10, 0.01, 1.0, 0).is_ok());
        assert!(McConfig::with_horizon(10, 0.01, 1.004, 0).is_err());
        assert!(McConfig::new(1, 0.01, 10, 0).is_err());
    }
}
