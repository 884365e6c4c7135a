//! Closed-form ground truth for linear dynamics with quadratic costs.
//!
//! For `dX = (A x + B u) dt + σ dW` with cost rate `½ xᵀQx + ½ uᵀRu`, the
//! risk-sensitive stationary value is `v(x) = ½ xᵀ S x` where `S` solves
//!
//! ```text
//! 0 = Q + Aᵀ S + S A + S (φ Σ − B R⁻¹ Bᵀ) S
//! ```
//!
//! with average cost `χ = ½ tr(S Σ)`, gain `K = R⁻¹ Bᵀ S`, and transformed
//! value `z = exp((φ − ψ) ½ xᵀ S x)`. When the control authority is removed
//! the same equation with quadratic term `A_exp · S Σ S` describes the
//! `(φ−ψ)`-sensitive value over uncontrolled dynamics; both forms must
//! produce the same `S` whenever `B R⁻¹ Bᵀ = ψ Σ`.
//!
//! The algebraic equation is solved by integrating the matrix Riccati ODE
//! backward to steady state and polishing with a Newton (Lyapunov) step.
//! Backward integration tolerates the indefinite quadratic term
//! `φΣ − BR⁻¹Bᵀ` that eigenvector-based LQR solvers reject, and diverging
//! integration cleanly signals risk-sensitivity breakdown. A Kleinman–Newton
//! route is provided as an independent cross-check for the risk-neutral case.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::risk::{quad_form, RiskParams};
use crate::sde::State;

/// Residual tolerance for an accepted algebraic solution: the Riccati
/// residual must satisfy `‖F(S)‖_F ≤ RESIDUAL_TOL · (1 + ‖S‖_F)`.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Norm threshold at which backward integration is declared divergent.
pub const BREAKDOWN_NORM: f64 = 1e8;

#[derive(Debug, Error)]
pub enum LqError {
    #[error("invalid LQ system: {0}")]
    Invalid(String),
    #[error(
        "Riccati integration diverged at tau = {tau:.4} (‖S‖ = {norm:.3e}); \
         the risk sensitivity is at or beyond its breakdown threshold"
    )]
    Breakdown { tau: f64, norm: f64 },
    #[error("no stabilizing solution: closed-loop eigenvalue with real part {max_re:.3e}")]
    NonStabilizing { max_re: f64 },
    #[error("Riccati iteration stalled with residual {residual:.3e}")]
    NoConvergence { residual: f64 },
    #[error("time {t} outside the solution grid [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
}

/// Linear system with quadratic cost: `dX = (Ax + Bu)dt + σ dW`,
/// `l = ½xᵀQx + ½uᵀRu`.
#[derive(Clone)]
pub struct LqSystem {
    pub a_dyn: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    sigma_cov: DMatrix<f64>,
    authority: DMatrix<f64>,
}

impl LqSystem {
    pub fn new(
        a_dyn: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma: DMatrix<f64>,
    ) -> Result<Self, LqError> {
        let n = a_dyn.nrows();
        if a_dyn.ncols() != n {
            return Err(LqError::Invalid("drift matrix must be square".into()));
        }
        if b.nrows() != n {
            return Err(LqError::Invalid("control matrix row count must match state".into()));
        }
        if sigma.nrows() != n {
            return Err(LqError::Invalid("noise matrix row count must match state".into()));
        }
        check_symmetric(&q, "Q")?;
        if symmetric_min_eig(&q) < -1e-10 * (1.0 + q.norm()) {
            return Err(LqError::Invalid("Q must be positive semidefinite".into()));
        }
        check_symmetric(&r, "R")?;
        if nalgebra::linalg::Cholesky::new(r.clone()).is_none() {
            return Err(LqError::Invalid("R must be positive definite".into()));
        }
        let sigma_cov = &sigma * sigma.transpose();
        if nalgebra::linalg::Cholesky::new(sigma_cov.clone()).is_none() {
            return Err(LqError::Invalid("sigma*sigma^T must be positive definite".into()));
        }
        let r_chol = nalgebra::linalg::Cholesky::new(r.clone()).expect("checked above");
        let authority = &b * r_chol.solve(&b.transpose());
        Ok(Self {
            a_dyn,
            b,
            q,
            r,
            sigma,
            sigma_cov,
            authority,
        })
    }

    /// The scalar benchmark: `A = -1, B = 1, Q = 1, R = 1, σ = 1`.
    pub fn scalar_ou() -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        Self::new(DMatrix::from_element(1, 1, -1.0), one.clone(), one.clone(), one.clone(), one)
            .expect("scalar benchmark system is well formed")
    }

    pub fn state_dim(&self) -> usize {
        self.a_dyn.nrows()
    }

    /// Noise covariance `Σ = σσᵀ`.
    pub fn sigma_cov(&self) -> &DMatrix<f64> {
        &self.sigma_cov
    }

    /// Control authority `B R⁻¹ Bᵀ`.
    pub fn authority(&self) -> &DMatrix<f64> {
        &self.authority
    }

    /// The same dynamics as a simulation model.
    pub fn to_diffusion_model(&self) -> crate::sde::DiffusionModel {
        crate::sde::DiffusionModel::linear(self.a_dyn.clone(), self.b.clone(), self.sigma.clone())
            .expect("validated LQ system yields a valid diffusion model")
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<(), LqError> {
    if m.nrows() != m.ncols() {
        return Err(LqError::Invalid(format!("{name} must be square")));
    }
    if (m - m.transpose()).norm() > 1e-10 * (1.0 + m.norm()) {
        return Err(LqError::Invalid(format!("{name} must be symmetric")));
    }
    Ok(())
}

fn symmetric_min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Stabilizing solution of the risk-sensitive algebraic Riccati equation,
/// with gain, average cost, and the achieved residual.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    /// Symmetric value matrix.
    pub s: DMatrix<f64>,
    /// Feedback gain `K = R⁻¹ Bᵀ S` (control is `u = -K x`).
    pub gain: DMatrix<f64>,
    /// Average cost per stage `χ = ½ tr(S Σ)`.
    pub chi: f64,
    /// Frobenius norm of the Riccati residual at `s`.
    pub residual: f64,
}

/// Stabilizing solution of the uncontrolled-form equation
/// `0 = Q + AᵀS + SA + A_exp · SΣS`.
#[derive(Clone, Debug)]
pub struct UncontrolledAre {
    pub s: DMatrix<f64>,
    pub chi: f64,
    pub residual: f64,
}

/// Riccati derivative `F(S) = Q + AᵀS + SA + S M S`.
fn riccati_rhs(a: &DMatrix<f64>, q: &DMatrix<f64>, m: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = q.clone();
    f += a.transpose() * s;
    f += s * a;
    f += s * m * s;
    f
}

/// Solves `Aᵀ X + X A = C` for symmetric `C` via the Kronecker system.
fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, LqError> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice(c.as_slice());
    let lu = op.lu();
    let x = lu
        .solve(&rhs)
        .ok_or(LqError::NoConvergence { residual: f64::NAN })?;
    let xm = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok(0.5 * (&xm + xm.transpose()))
}

/// Core solver: integrate `dS/dτ = Q + AᵀS + SA + S M S` from `S = 0` to
/// steady state, then polish with Newton (Lyapunov) steps until the residual
/// meets [`RESIDUAL_TOL`].
fn solve_are_core(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64), LqError> {
    let n = a.nrows();
    let h = 1e-3;
    let max_tau = 2000.0;
    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut tau = 0.0;
    let mut settled = false;
    while tau < max_tau {
        let k1 = riccati_rhs(a, q, m, &s);
        if k1.norm() < 1e-12 * (1.0 + s.norm()) {
            settled = true;
            break;
        }
        let k2 = riccati_rhs(a, q, m, &(&s + 0.5 * h * &k1));
        let k3 = riccati_rhs(a, q, m, &(&s + 0.5 * h * &k2));
        let k4 = riccati_rhs(a, q, m, &(&s + h * &k3));
        s += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        s = 0.5 * (&s + s.transpose());
        tau += h;
        if !s.iter().all(|v| v.is_finite()) || s.norm() > BREAKDOWN_NORM {
            return Err(LqError::Breakdown { tau, norm: s.norm() });
        }
    }
    if !settled {
        return Err(LqError::NoConvergence {
            residual: riccati_rhs(a, q, m, &s).norm(),
        });
    }
    // Newton polish: solve Acl^T D + D Acl = -F(S) with Acl = A + M S.
    let mut residual = riccati_rhs(a, q, m, &s).norm();
    for _ in 0..3 {
        if residual <= RESIDUAL_TOL * (1.0 + s.norm()) && residual < 1e-12 * (1.0 + s.norm()) {
            break;
        }
        let f = riccati_rhs(a, q, m, &s);
        let acl = a + m * &s;
        let delta = solve_lyapunov(&acl, &(-f))?;
        s += delta;
        s = 0.5 * (&s + s.transpose());
        residual = riccati_rhs(a, q, m, &s).norm();
    }
    if residual > RESIDUAL_TOL * (1.0 + s.norm()) {
        return Err(LqError::NoConvergence { residual });
    }
    Ok((s, residual))
}

fn check_hurwitz(acl: &DMatrix<f64>) -> Result<(), LqError> {
    let eigs = acl.clone().complex_eigenvalues();
    let max_re = eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re >= -1e-12 * (1.0 + acl.norm()) {
        return Err(LqError::NonStabilizing { max_re });
    }
    Ok(())
}

/// Solves the risk-sensitive algebraic Riccati equation
/// `0 = Q + AᵀS + SA + S(φΣ − BR⁻¹Bᵀ)S` for the stabilizing `S`.
pub fn solve_algebraic_riccati(sys: &LqSystem, phi: f64) -> Result<RiccatiSolution, LqError> {
    let m = phi * sys.sigma_cov() - sys.authority();
    let (s, residual) = solve_are_core(&sys.a_dyn, &sys.q, &m)?;
    check_hurwitz(&(&sys.a_dyn + &m * &s))?;
    let r_chol = nalgebra::linalg::Cholesky::new(sys.r.clone()).expect("R validated SPD");
    let gain = r_chol.solve(&(sys.b.transpose() * &s));
    let chi = 0.5 * (&s * sys.sigma_cov()).trace();
    Ok(RiccatiSolution { s, gain, chi, residual })
}

/// Solves the uncontrolled-form equation `0 = Q + AᵀS + SA + A_exp·SΣS`,
/// the value of the `A_exp`-sensitive cost functional over uncontrolled
/// dynamics. With `BR⁻¹Bᵀ = ψΣ` and `A_exp = φ − ψ` this coincides with
/// [`solve_algebraic_riccati`].
pub fn solve_uncontrolled_are(
    a_dyn: &DMatrix<f64>,
    q: &DMatrix<f64>,
    sigma_cov: &DMatrix<f64>,
    a_exp: f64,
) -> Result<UncontrolledAre, LqError> {
    let m = a_exp * sigma_cov;
    let (s, residual) = solve_are_core(a_dyn, q, &m)?;
    check_hurwitz(&(a_dyn + &m * &s))?;
    let chi = 0.5 * (&s * sigma_cov).trace();
    Ok(UncontrolledAre { s, chi, residual })
}

/// Risk-neutral CARE via Kleinman–Newton iteration: an independent route
/// used to cross-check the φ = 0 case. Requires the open loop (or the
/// initial gain) to be stable.
pub fn solve_care_kleinman(sys: &LqSystem) -> Result<DMatrix<f64>, LqError> {
    check_hurwitz(&sys.a_dyn).map_err(|_| {
        LqError::Invalid("Kleinman iteration needs a stable open loop as its initial gain".into())
    })?;
    let n = sys.state_dim();
    let r_chol = nalgebra::linalg::Cholesky::new(sys.r.clone()).expect("R validated SPD");
    let mut s = DMatrix::<f64>::zeros(n, n);
    for _ in 0..200 {
        let k = r_chol.solve(&(sys.b.transpose() * &s));
        let acl = &sys.a_dyn - &sys.b * &k;
        let cost = &sys.q + k.transpose() * &sys.r * &k;
        let next = solve_lyapunov(&acl, &(-cost))?;
        let diff = (&next - &s).norm();
        s = next;
        if diff <= 1e-12 * (1.0 + s.norm()) {
            return Ok(s);
        }
    }
    Err(LqError::NoConvergence {
        residual: riccati_rhs(&sys.a_dyn, &sys.q, &(-sys.authority()), &s).norm(),
    })
}

/// Finite-horizon Riccati solution on a uniform grid over `[0, T]`:
/// `S(t)` per node plus the offset `c(t)` with `-ċ = ½ tr(SΣ)`, `c(T) = 0`.
/// The finite-horizon value is `½ xᵀ S(t) x + c(t)`.
#[derive(Clone, Debug)]
pub struct DifferentialRiccatiSolution {
    times: Vec<f64>,
    s_nodes: Vec<DMatrix<f64>>,
    c_nodes: Vec<f64>,
}

impl DifferentialRiccatiSolution {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("solution has at least one node")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `S(t)` with linear interpolation between grid nodes.
    pub fn s_at(&self, t: f64) -> Result<DMatrix<f64>, LqError> {
        let (i, w) = self.locate(t)?;
        Ok(if w == 0.0 {
            self.s_nodes[i].clone()
        } else {
            (1.0 - w) * &self.s_nodes[i] + w * &self.s_nodes[i + 1]
        })
    }

    pub fn c_at(&self, t: f64) -> Result<f64, LqError> {
        let (i, w) = self.locate(t)?;
        Ok(if w == 0.0 {
            self.c_nodes[i]
        } else {
            (1.0 - w) * self.c_nodes[i] + w * self.c_nodes[i + 1]
        })
    }

    fn locate(&self, t: f64) -> Result<(usize, f64), LqError> {
        let horizon = self.horizon();
        let slack = 1e-9 * horizon.max(1.0);
        if t < -slack || t > horizon + slack {
            return Err(LqError::OutOfRange { t, horizon });
        }
        if t >= horizon {
            // boundary node, no interpolation: the terminal data is exact
            return Ok((self.times.len() - 1, 0.0));
        }
        let t = t.max(0.0);
        let dt = self.times[1] - self.times[0];
        let idx = ((t / dt).floor() as usize).min(self.times.len() - 2);
        let w = (t - self.times[idx]) / dt;
        Ok((idx, w.clamp(0.0, 1.0)))
    }
}

/// Integrates the finite-horizon risk-sensitive Riccati equation
/// `-Ṡ = Q + AᵀS + SA + S(φΣ − BR⁻¹Bᵀ)S`, `S(T) = M`, backward with RK4,
/// along with the offset `c`.
pub fn solve_differential_riccati(
    sys: &LqSystem,
    phi: f64,
    horizon: f64,
    terminal: &DMatrix<f64>,
    dt_ode: Option<f64>,
) -> Result<DifferentialRiccatiSolution, LqError> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(LqError::Invalid("horizon must be positive".into()));
    }
    check_symmetric(terminal, "terminal weight")?;
    if terminal.nrows() != sys.state_dim() {
        return Err(LqError::Invalid("terminal weight dimension mismatch".into()));
    }
    let m = phi * sys.sigma_cov() - sys.authority();
    let h_target = dt_ode.unwrap_or_else(|| (1e-3_f64).min(horizon / 2000.0));
    let steps = (horizon / h_target).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;

    let mut s = terminal.clone();
    let mut c = 0.0;
    let mut s_rev: Vec<DMatrix<f64>> = Vec::with_capacity(steps + 1);
    let mut c_rev: Vec<f64> = Vec::with_capacity(steps + 1);
    s_rev.push(s.clone());
    c_rev.push(c);

    let c_rate = |s: &DMatrix<f64>| 0.5 * (s * sys.sigma_cov()).trace();
    for step in 0..steps {
        let k1 = riccati_rhs(&sys.a_dyn, &sys.q, &m, &s);
        let l1 = c_rate(&s);
        let s2 = &s + 0.5 * h * &k1;
        let k2 = riccati_rhs(&sys.a_dyn, &sys.q, &m, &s2);
        let l2 = c_rate(&s2);
        let s3 = &s + 0.5 * h * &k2;
        let k3 = riccati_rhs(&sys.a_dyn, &sys.q, &m, &s3);
        let l3 = c_rate(&s3);
        let s4 = &s + h * &k3;
        let k4 = riccati_rhs(&sys.a_dyn, &sys.q, &m, &s4);
        let l4 = c_rate(&s4);
        s += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        s = 0.5 * (&s + s.transpose());
        c += (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
        if !s.iter().all(|v| v.is_finite()) || s.norm() > BREAKDOWN_NORM {
            return Err(LqError::Breakdown {
                tau: (step + 1) as f64 * h,
                norm: s.norm(),
            });
        }
        s_rev.push(s.clone());
        c_rev.push(c);
    }

    s_rev.reverse();
    c_rev.reverse();
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * h).collect();
    Ok(DifferentialRiccatiSolution {
        times,
        s_nodes: s_rev,
        c_nodes: c_rev,
    })
}

/// Stationary quantities at a state: value `v = ½xᵀSx`, transformed value
/// `z = exp((φ−ψ) v)`, and the optimal control `u* = −R⁻¹BᵀS x = −K x`.
#[derive(Clone, Debug)]
pub struct StationaryValues {
    pub v: f64,
    pub z: f64,
    pub u_star: DVector<f64>,
}

pub fn lq_stationary_values(
    sol: &RiccatiSolution,
    params: &RiskParams,
    x: &State,
) -> StationaryValues {
    let v = 0.5 * quad_form(&sol.s, x);
    let z = (params.exponent * v).exp();
    let u_star = -(&sol.gain * x);
    StationaryValues { v, z, u_star }
}

/// Finite-horizon value `½ xᵀ S(t) x + c(t)` with `S`, `c` interpolated
/// linearly between grid nodes.
pub fn lq_finite_horizon_value(
    dsol: &DifferentialRiccatiSolution,
    t: f64,
    x: &State,
) -> Result<f64, LqError> {
    let s = dsol.s_at(t)?;
    let c = dsol.c_at(t)?;
    Ok(0.5 * quad_form(&s, x) + c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_s(sol: &RiccatiSolution) -> f64 {
        sol.s[(0, 0)]
    }

    #[test]
    fn scalar_closed_forms() {
        let sys = LqSystem::scalar_ou();
        // phi = 0: S^2 + 2S - 1 = 0.
        let s0 = solve_algebraic_riccati(&sys, 0.0).unwrap();
        assert_relative_eq!(scalar_s(&s0), 2.0_f64.sqrt() - 1.0, epsilon = 1e-10);
        assert_relative_eq!(s0.chi, 0.5 * (2.0_f64.sqrt() - 1.0), epsilon = 1e-10);
        assert_relative_eq!(s0.gain[(0, 0)], 2.0_f64.sqrt() - 1.0, epsilon = 1e-10);
        // phi = 0.5: S^2 + 4S - 2 = 0.
        let s05 = solve_algebraic_riccati(&sys, 0.5).unwrap();
        assert_relative_eq!(scalar_s(&s05), 6.0_f64.sqrt() - 2.0, epsilon = 1e-10);
        assert_relative_eq!(s05.chi, 0.5 * (6.0_f64.sqrt() - 2.0), epsilon = 1e-10);
        // phi = -1: 2S^2 + 2S - 1 = 0.
        let sm1 = solve_algebraic_riccati(&sys, -1.0).unwrap();
        assert_relative_eq!(scalar_s(&sm1), (3.0_f64.sqrt() - 1.0) / 2.0, epsilon = 1e-10);
        assert_relative_eq!(sm1.chi, (3.0_f64.sqrt() - 1.0) / 4.0, epsilon = 1e-10);
    }

    #[test]
    fn residual_within_tolerance() {
        let sys = LqSystem::scalar_ou();
        for phi in [-1.0, 0.0, 0.5] {
            let sol = solve_algebraic_riccati(&sys, phi).unwrap();
            assert!(sol.residual <= RESIDUAL_TOL * (1.0 + sol.s.norm()));
            let recomputed = 0.5 * (&sol.s * sys.sigma_cov()).trace();
            assert_eq!(sol.chi, recomputed);
        }
    }

    #[test]
    fn equivalence_of_forms() {
        // With B R^{-1} B^T = psi * Sigma the controlled equation at phi and
        // the uncontrolled equation at exponent phi - psi coincide.
        let sys = LqSystem::scalar_ou();
        let psi = 1.0;
        for phi in [-1.0, 0.0, 0.5] {
            let controlled = solve_algebraic_riccati(&sys, phi).unwrap();
            let free =
                solve_uncontrolled_are(&sys.a_dyn, &sys.q, sys.sigma_cov(), phi - psi).unwrap();
            assert!((controlled.s[(0, 0)] - free.s[(0, 0)]).abs() <= 1e-9);
            assert!((controlled.chi - free.chi).abs() <= 1e-9);
        }
    }

    #[test]
    fn equivalence_of_forms_two_dim() {
        // 2-d system with B R^{-1} B^T = 0.5 * Sigma.
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let r = DMatrix::identity(2, 2);
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0_f64.sqrt(), 0.0, 0.0, 2.0 * 2.0_f64.sqrt()]);
        let sys = LqSystem::new(a.clone(), b, q.clone(), r, sigma).unwrap();
        let psi = 0.5;
        let phi = 0.2;
        let controlled = solve_algebraic_riccati(&sys, phi).unwrap();
        let free = solve_uncontrolled_are(&a, &q, sys.sigma_cov(), phi - psi).unwrap();
        assert!((&controlled.s - &free.s).norm() <= 1e-9 * (1.0 + free.s.norm()));
    }

    #[test]
    fn monotone_in_phi() {
        let sys = LqSystem::scalar_ou();
        let phis = [-1.0, -0.5, 0.0, 0.25, 0.5];
        let mut last = f64::NEG_INFINITY;
        for phi in phis {
            let s = scalar_s(&solve_algebraic_riccati(&sys, phi).unwrap());
            assert!(s > last, "S not increasing at phi = {phi}");
            last = s;
        }
    }

    #[test]
    fn breakdown_detected() {
        let sys = LqSystem::scalar_ou();
        let err = solve_algebraic_riccati(&sys, 3.0).unwrap_err();
        assert!(matches!(err, LqError::Breakdown { .. } | LqError::NoConvergence { .. }));
    }

    #[test]
    fn kleinman_matches_risk_neutral() {
        let sys = LqSystem::scalar_ou();
        let newton = solve_care_kleinman(&sys).unwrap();
        let ode = solve_algebraic_riccati(&sys, 0.0).unwrap();
        assert!((newton[(0, 0)] - ode.s[(0, 0)]).abs() <= 1e-9);
    }

    #[test]
    fn differential_zero_cost_is_zero() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LqSystem::new(
            DMatrix::from_element(1, 1, -1.0),
            one.clone(),
            DMatrix::zeros(1, 1),
            one.clone(),
            one,
        )
        .unwrap();
        let dsol =
            solve_differential_riccati(&sys, 0.5, 2.0, &DMatrix::zeros(1, 1), None).unwrap();
        let x = DVector::from_element(1, 1.3);
        assert_eq!(lq_finite_horizon_value(&dsol, 0.7, &x).unwrap(), 0.0);
    }

    #[test]
    fn differential_converges_to_algebraic() {
        let sys = LqSystem::scalar_ou();
        let alg = solve_algebraic_riccati(&sys, 0.5).unwrap();
        let dsol =
            solve_differential_riccati(&sys, 0.5, 20.0, &DMatrix::zeros(1, 1), None).unwrap();
        let s0 = dsol.s_at(0.0).unwrap()[(0, 0)];
        assert!((s0 - alg.s[(0, 0)]).abs() <= 1e-6, "S(0) = {s0}");
    }

    #[test]
    fn tanh_closed_form() {
        // A = 0, Q = 1, phi = 0, Sigma = 1, B R^{-1} B^T = 1:
        // -S' = 1 - S^2 with S(T) = 0 gives S(0) = tanh(T).
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LqSystem::new(DMatrix::zeros(1, 1), one.clone(), one.clone(), one.clone(), one)
            .unwrap();
        for horizon in [0.5, 1.0, 2.0] {
            let dsol =
                solve_differential_riccati(&sys, 0.0, horizon, &DMatrix::zeros(1, 1), None)
                    .unwrap();
            let s0 = dsol.s_at(0.0).unwrap()[(0, 0)];
            assert!(
                (s0 - horizon.tanh()).abs() <= 1e-6,
                "S(0) = {s0} vs tanh({horizon}) = {}",
                horizon.tanh()
            );
        }
    }

    #[test]
    fn terminal_condition_exact() {
        let sys = LqSystem::scalar_ou();
        let m = DMatrix::from_element(1, 1, 0.8);
        let dsol = solve_differential_riccati(&sys, 0.5, 2.0, &m, None).unwrap();
        let x = DVector::from_element(1, 3.0);
        let v_t = lq_finite_horizon_value(&dsol, 2.0, &x).unwrap();
        assert_relative_eq!(v_t, 0.5 * 0.8 * 9.0, epsilon = 1e-12);
        // x = 0 isolates the offset c(t), which is nonnegative and zero at T.
        let c0 = lq_finite_horizon_value(&dsol, 0.0, &DVector::zeros(1)).unwrap();
        assert!(c0 > 0.0);
        assert_eq!(lq_finite_horizon_value(&dsol, 2.0, &DVector::zeros(1)).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_time_rejected() {
        let sys = LqSystem::scalar_ou();
        let dsol =
            solve_differential_riccati(&sys, 0.0, 1.0, &DMatrix::zeros(1, 1), None).unwrap();
        assert!(matches!(
            lq_finite_horizon_value(&dsol, 1.5, &DVector::zeros(1)),
            Err(LqError::OutOfRange { .. })
        ));
    }

    #[test]
    fn stationary_values_examples() {
        let sys = LqSystem::scalar_ou();
        let sol = solve_algebraic_riccati(&sys, 0.5).unwrap();
        let params = RiskParams::new(0.5, 1.0).unwrap();
        let origin = lq_stationary_values(&sol, &params, &DVector::zeros(1));
        assert_eq!(origin.v, 0.0);
        assert_eq!(origin.z, 1.0);
        assert_eq!(origin.u_star[0], 0.0);

        let s = 6.0_f64.sqrt() - 2.0;
        let at_one = lq_stationary_values(&sol, &params, &DVector::from_element(1, 1.0));
        assert_relative_eq!(at_one.v, 0.5 * s, epsilon = 1e-9);
        assert_relative_eq!(at_one.z, (-0.5 * 0.5 * s).exp(), epsilon = 1e-9);
        assert_relative_eq!(at_one.u_star[0], -s, epsilon = 1e-9);

        let at_two = lq_stationary_values(&sol, &params, &DVector::from_element(1, 2.0));
        assert_relative_eq!(at_two.v, 2.0 * s, epsilon = 1e-9);
        assert_relative_eq!(at_two.u_star[0], -2.0 * s, epsilon = 1e-9);
    }

    #[test]
    fn rejects_invalid_systems() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(LqSystem::new(
            DMatrix::from_element(1, 1, -1.0),
            one.clone(),
            DMatrix::from_element(1, 1, -0.1),
            one.clone(),
            one.clone()
        )
        .is_err());
        assert!(LqSystem::new(
            DMatrix::from_element(1, 1, -1.0),
            one.clone(),
            one.clone(),
            DMatrix::zeros(1, 1),
            one.clone()
        )
        .is_err());
        assert!(LqSystem::new(
            DMatrix::from_element(1, 1, -1.0),
            one.clone(),
            one.clone(),
            one,
            DMatrix::zeros(1, 1)
        )
        .is_err());
    }
}
