//! Cost models and risk parameters.
//!
//! The cost rate is control-quadratic, `l(x, u) = q(x) + ½ uᵀ R u` with
//! `R ≻ 0`, and the control authority must be proportional to the noise
//! covariance, `B R⁻¹ Bᵀ = ψ Σ` with `ψ > 0`. Under those conditions the
//! exponential transform with scale `λ = 1/(ψ - φ)` linearises the HJB and
//! the optimal φ-sensitive value equals the `(φ - ψ)`-sensitive cost-to-go
//! of the uncontrolled process. The proportionality is checked numerically
//! at user-supplied probe states.

use nalgebra::DMatrix;
use std::sync::Arc;
use thiserror::Error;

use crate::estimators::log_mean_exp;
use crate::sde::{DiffusionModel, State, StateCostFn};

/// Relative tolerance used when checking `B R⁻¹ Bᵀ = ψ Σ`.
pub const DEFAULT_PSI_TOL: f64 = 1e-8;
/// Below this gap |ψ - φ| the transform scale λ has a pole.
pub const DEGENERATE_RISK_GAP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("control weight R must be symmetric positive definite")]
    ControlWeightNotSpd,
    #[error("psi must be positive, got {0}")]
    NonPositivePsi(f64),
    #[error(
        "degenerate risk parameters: |psi - phi| = {gap:.3e} < {limit:.3e}; \
         the transform exponent vanishes"
    )]
    DegenerateRisk { gap: f64, limit: f64 },
    #[error(
        "noise/control proportionality violated: worst probe {probe} has \
         relative residual {residual:.3e} (tolerance {tol:.3e})"
    )]
    AssumptionViolation {
        probe: usize,
        residual: f64,
        tol: f64,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Control-quadratic cost model: state rate `q`, weight `R`, optional
/// terminal cost, and a discount used only by discounted operations.
#[derive(Clone)]
pub struct RiskCostModel {
    state_cost: Arc<StateCostFn>,
    control_weight: DMatrix<f64>,
    terminal_cost: Option<Arc<StateCostFn>>,
    discount: f64,
}

impl std::fmt::Debug for RiskCostModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RiskCostModel")
            .field("control_dim", &self.control_weight.nrows())
            .field("has_terminal", &self.terminal_cost.is_some())
            .field("discount", &self.discount)
            .finish_non_exhaustive()
    }
}

impl RiskCostModel {
    pub fn new(
        state_cost: Arc<StateCostFn>,
        control_weight: DMatrix<f64>,
        terminal_cost: Option<Arc<StateCostFn>>,
        discount: f64,
    ) -> Result<Self, RiskError> {
        check_spd(&control_weight).ok_or(RiskError::ControlWeightNotSpd)?;
        if discount < 0.0 || !discount.is_finite() {
            return Err(RiskError::Invalid("discount must be nonnegative".into()));
        }
        Ok(Self {
            state_cost,
            control_weight,
            terminal_cost,
            discount,
        })
    }

    /// Quadratic costs `q(x) = ½ xᵀ Q x`, `m(x) = ½ xᵀ M x`.
    pub fn quadratic(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        terminal: Option<DMatrix<f64>>,
        discount: f64,
    ) -> Result<Self, RiskError> {
        if q.nrows() != q.ncols() {
            return Err(RiskError::Invalid("state cost matrix must be square".into()));
        }
        let terminal_cost = terminal
            .map(|m| -> Result<Arc<StateCostFn>, RiskError> {
                if m.shape() != q.shape() {
                    return Err(RiskError::Invalid(
                        "terminal weight must match the state cost shape".into(),
                    ));
                }
                Ok(Arc::new(move |x: &State| 0.5 * quad_form(&m, x)))
            })
            .transpose()?;
        let qm = q;
        Self::new(
            Arc::new(move |x: &State| 0.5 * quad_form(&qm, x)),
            r,
            terminal_cost,
            discount,
        )
    }

    /// The benchmark cost `q = ½ x²`, `R = 1`, no terminal cost.
    pub fn scalar_ou(discount: f64) -> Self {
        Self::quadratic(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
            discount,
        )
        .expect("scalar benchmark cost is well formed")
    }

    pub fn state_cost(&self) -> &StateCostFn {
        self.state_cost.as_ref()
    }

    pub fn control_weight(&self) -> &DMatrix<f64> {
        &self.control_weight
    }

    pub fn terminal_cost(&self) -> Option<&StateCostFn> {
        self.terminal_cost.as_deref().map(|f| f as &StateCostFn)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }
}

pub(crate) fn quad_form(m: &DMatrix<f64>, x: &State) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        let xj = x[j];
        for i in 0..m.nrows() {
            acc += x[i] * m[(i, j)] * xj;
        }
    }
    acc
}

fn check_spd(m: &DMatrix<f64>) -> Option<()> {
    if m.nrows() != m.ncols() {
        return None;
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-10 * (1.0 + m.norm()) {
        return None;
    }
    nalgebra::linalg::Cholesky::new(m.clone()).map(|_| ())
}

/// Risk parameters: sensitivity φ, noise/control proportionality ψ, the
/// transform scale λ = 1/(ψ - φ) and the path-integral exponent A = φ - ψ.
#[derive(Clone, Copy, Debug)]
pub struct RiskParams {
    pub phi: f64,
    pub psi: f64,
    pub lambda: f64,
    pub exponent: f64,
}

impl RiskParams {
    pub fn new(phi: f64, psi: f64) -> Result<Self, RiskError> {
        let lambda = lambda_of(phi, psi)?;
        Ok(Self {
            phi,
            psi,
            lambda,
            exponent: phi - psi,
        })
    }
}

/// Transform scale `λ = 1/(ψ - φ)`.
///
/// Fails when ψ is not positive or when φ is within [`DEGENERATE_RISK_GAP`]
/// of ψ; at the pole every path-integral estimator is undefined.
pub fn lambda_of(phi: f64, psi: f64) -> Result<f64, RiskError> {
    if !(psi > 0.0) || !psi.is_finite() {
        return Err(RiskError::NonPositivePsi(psi));
    }
    if !phi.is_finite() {
        return Err(RiskError::Invalid("phi must be finite".into()));
    }
    let gap = (psi - phi).abs();
    if gap < DEGENERATE_RISK_GAP {
        return Err(RiskError::DegenerateRisk {
            gap,
            limit: DEGENERATE_RISK_GAP,
        });
    }
    Ok(1.0 / (psi - phi))
}

/// Fits the proportionality constant ψ in `B(x) R⁻¹ B(x)ᵀ = ψ Σ` and checks
/// it at every probe state.
///
/// ψ is read off at the first probe as `tr(Σ⁻¹ B R⁻¹ Bᵀ)/n`; each probe must
/// then satisfy `‖B R⁻¹ Bᵀ − ψΣ‖_F ≤ tol · ‖ψΣ‖_F`, otherwise the worst
/// probe is reported.
pub fn compute_psi(
    model: &DiffusionModel,
    control_weight: &DMatrix<f64>,
    probes: &[State],
    tol: f64,
) -> Result<f64, RiskError> {
    check_spd(control_weight).ok_or(RiskError::ControlWeightNotSpd)?;
    if probes.is_empty() {
        return Err(RiskError::Invalid("at least one probe state is required".into()));
    }
    let n = model.state_dim();
    let sigma_cov = model.sigma_cov();
    let sigma_chol = nalgebra::linalg::Cholesky::new(sigma_cov.clone())
        .expect("model guarantees positive definite noise covariance");
    let r_chol = nalgebra::linalg::Cholesky::new(control_weight.clone())
        .ok_or(RiskError::ControlWeightNotSpd)?;

    let authority = |x: &State| -> DMatrix<f64> {
        let mut b = DMatrix::zeros(n, model.control_dim());
        model.control_matrix_into(x, &mut b);
        // B R^{-1} B^T via the Cholesky factor of R
        let rinv_bt = r_chol.solve(&b.transpose());
        &b * rinv_bt
    };

    let first = authority(&probes[0]);
    let psi = sigma_chol.solve(&first).trace() / n as f64;
    if !(psi > 0.0) || !psi.is_finite() {
        return Err(RiskError::NonPositivePsi(psi));
    }

    let scale = (sigma_cov * psi).norm();
    let mut worst = (0usize, 0.0f64);
    for (i, x) in probes.iter().enumerate() {
        let residual = (authority(x) - sigma_cov * psi).norm() / scale;
        if residual > worst.1 {
            worst = (i, residual);
        }
    }
    if worst.1 > tol {
        return Err(RiskError::AssumptionViolation {
            probe: worst.0,
            residual: worst.1,
            tol,
        });
    }
    Ok(psi)
}

/// Compares the exponential risk functional against its small-φ expansion on
/// a fixed sample of path costs.
///
/// Returns `(exact, expansion)` with
/// `exact = (1/φ) log mean exp(φ J)` and
/// `expansion = mean(J) + ½ φ var(J)` (population variance of the sample).
/// The gap between the two is O(φ²) in the expansion regime
/// `|φ| (max J − min J) ≲ 1`.
pub fn risk_expansion_check(samples: &[f64], phi: f64) -> (f64, f64) {
    assert!(!samples.is_empty(), "risk_expansion_check needs samples");
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let var = samples.iter().map(|j| (j - mean) * (j - mean)).sum::<f64>() / k;
    let expansion = mean + 0.5 * phi * var;
    let exact = if phi == 0.0 {
        mean
    } else {
        let scaled: Vec<f64> = samples.iter().map(|j| phi * j).collect();
        log_mean_exp(&scaled) / phi
    };
    (exact, expansion)
}
