//! Experiment configuration: one JSON document per experiment, validated
//! into a resolved form with all derived quantities computed up front.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rspic::{compute_psi, lambda_of, DiffusionModel, LqSystem, RiskCostModel, RiskParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// Experiment kinds understood by the runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "fh-identity")]
    FhIdentity,
    #[serde(rename = "avg-chi")]
    AvgChi,
    #[serde(rename = "avg-diffvalue")]
    AvgDiffValue,
    #[serde(rename = "disc-bound")]
    DiscBound,
    #[serde(rename = "jensen")]
    Jensen,
    #[serde(rename = "recurrence")]
    Recurrence,
    #[serde(rename = "fit-offline")]
    FitOffline,
    #[serde(rename = "lq-oracle")]
    LqOracle,
    #[serde(rename = "policy-loop")]
    PolicyLoop,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::FhIdentity => "fh-identity",
            Kind::AvgChi => "avg-chi",
            Kind::AvgDiffValue => "avg-diffvalue",
            Kind::DiscBound => "disc-bound",
            Kind::Jensen => "jensen",
            Kind::Recurrence => "recurrence",
            Kind::FitOffline => "fit-offline",
            Kind::LqOracle => "lq-oracle",
            Kind::PolicyLoop => "policy-loop",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub kind: Kind,
    #[serde(default)]
    pub system: Option<RawSystem>,
    #[serde(default)]
    pub cost: Option<RawCost>,
    #[serde(default)]
    pub risk: Option<RawRisk>,
    #[serde(default)]
    pub mc: Option<RawMc>,
    #[serde(default)]
    pub eval: Option<serde_json::Value>,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSystem {
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub a_dyn: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCost {
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub terminal: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRisk {
    pub phi: f64,
    /// A number, or the string `"derive"` to fit ψ from the system.
    pub psi: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMc {
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub t1: Option<f64>,
    #[serde(default)]
    pub t2: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub divergence_bound: Option<f64>,
}

/// Fully validated configuration with derived quantities.
pub struct ResolvedConfig {
    pub kind: Kind,
    pub raw: RawConfig,
    pub sys: LqSystem,
    pub model: DiffusionModel,
    pub cost: RiskCostModel,
    pub q_matrix: DMatrix<f64>,
    pub r_matrix: DMatrix<f64>,
    pub terminal: Option<DMatrix<f64>>,
    pub alpha: f64,
    pub params: Option<RiskParams>,
    pub paths: usize,
    pub dt: f64,
    pub horizon: Option<f64>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub seed: u64,
    pub divergence_bound: Option<f64>,
    pub output: Option<String>,
}

fn to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(field_err(field, "matrix must be nonempty"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(field_err(field, "matrix rows have unequal lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub fn state_vec(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

impl ResolvedConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text)?;
        Self::from_raw(raw)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let kind = raw.kind;

        // -- system -------------------------------------------------------
        let system = raw
            .system
            .as_ref()
            .ok_or_else(|| field_err("system", "required"))?;
        let (a_dyn, b, sigma) = match (&system.builtin, &system.a_dyn) {
            (Some(name), _) if name == "scalar-ou" => {
                let one = vec![vec![1.0]];
                (
                    to_matrix(&[vec![-1.0]], "system.a_dyn")?,
                    to_matrix(&one, "system.b")?,
                    to_matrix(&one, "system.sigma")?,
                )
            }
            (Some(name), _) => {
                return Err(field_err("system.builtin", format!("unknown builtin '{name}'")))
            }
            (None, Some(_)) => (
                to_matrix(
                    system.a_dyn.as_ref().unwrap(),
                    "system.a_dyn",
                )?,
                to_matrix(
                    system
                        .b
                        .as_ref()
                        .ok_or_else(|| field_err("system.b", "required with system.a_dyn"))?,
                    "system.b",
                )?,
                to_matrix(
                    system
                        .sigma
                        .as_ref()
                        .ok_or_else(|| field_err("system.sigma", "required with system.a_dyn"))?,
                    "system.sigma",
                )?,
            ),
            (None, None) => {
                return Err(field_err(
                    "system",
                    "provide either builtin: \"scalar-ou\" or explicit a_dyn/b/sigma",
                ))
            }
        };
        let n = a_dyn.nrows();

        // -- cost ---------------------------------------------------------
        let default_eye = || DMatrix::<f64>::identity(n, n);
        let (q_matrix, r_matrix, terminal, alpha) = match &raw.cost {
            Some(c) => {
                let q = match &c.q {
                    Some(m) => to_matrix(m, "cost.q")?,
                    None => default_eye(),
                };
                let r = match &c.r {
                    Some(m) => to_matrix(m, "cost.r")?,
                    None => DMatrix::identity(b.ncols(), b.ncols()),
                };
                let terminal = c
                    .terminal
                    .as_ref()
                    .map(|m| to_matrix(m, "cost.terminal"))
                    .transpose()?;
                let alpha = c.alpha.unwrap_or(0.0);
                if alpha < 0.0 {
                    return Err(field_err("cost.alpha", "must be nonnegative"));
                }
                (q, r, terminal, alpha)
            }
            None => (default_eye(), DMatrix::identity(b.ncols(), b.ncols()), None, 0.0),
        };

        let sys = LqSystem::new(a_dyn, b, q_matrix.clone(), r_matrix.clone(), sigma)
            .map_err(|e| field_err("system", e.to_string()))?;
        let model = sys.to_diffusion_model();
        let cost = RiskCostModel::quadratic(
            q_matrix.clone(),
            r_matrix.clone(),
            terminal.clone(),
            alpha,
        )
        .map_err(|e| field_err("cost", e.to_string()))?;

        // -- risk ---------------------------------------------------------
        let params = match &raw.risk {
            None => None,
            Some(risk) => {
                if !risk.phi.is_finite() {
                    return Err(field_err("risk.phi", "must be finite"));
                }
                let psi = match &risk.psi {
                    serde_json::Value::Number(v) => {
                        let psi = v
                            .as_f64()
                            .ok_or_else(|| field_err("risk.psi", "must be a number"))?;
                        // verify the supplied value against the system
                        let derived = derive_psi(&model, &r_matrix)
                            .map_err(|m| field_err("risk.psi", m))?;
                        if (derived - psi).abs() > 1e-6 * psi.abs().max(1.0) {
                            return Err(field_err(
                                "risk.psi",
                                format!("system implies psi = {derived}, config says {psi}"),
                            ));
                        }
                        psi
                    }
                    serde_json::Value::String(s) if s == "derive" => {
                        derive_psi(&model, &r_matrix).map_err(|m| field_err("risk.psi", m))?
                    }
                    _ => {
                        return Err(field_err(
                            "risk.psi",
                            "must be a number or the string \"derive\"",
                        ))
                    }
                };
                lambda_of(risk.phi, psi)
                    .map_err(|e| field_err("risk", e.to_string()))?;
                Some(
                    RiskParams::new(risk.phi, psi)
                        .map_err(|e| field_err("risk", e.to_string()))?,
                )
            }
        };

        // -- mc -------------------------------------------------------------
        let mc = raw.mc.as_ref().ok_or_else(|| field_err("mc", "required"))?;
        let seed = mc
            .seed
            .ok_or_else(|| field_err("mc.seed", "required (runs never seed from the clock)"))?;
        let paths = mc.paths.ok_or_else(|| field_err("mc.paths", "required"))?;
        if paths < 2 {
            return Err(field_err("mc.paths", "at least 2 paths required"));
        }
        let dt = mc.dt.ok_or_else(|| field_err("mc.dt", "required"))?;
        if !(dt > 0.0) {
            return Err(field_err("mc.dt", "must be positive"));
        }

        Ok(Self {
            kind,
            sys,
            model,
            cost,
            q_matrix,
            r_matrix,
            terminal,
            alpha,
            params,
            paths,
            dt,
            horizon: mc.horizon,
            t1: mc.t1,
            t2: mc.t2,
            seed,
            divergence_bound: mc.divergence_bound,
            output: raw.output.clone(),
            raw,
        })
    }

    /// Risk parameters, required by most kinds.
    pub fn require_params(&self) -> Result<RiskParams, ConfigError> {
        self.params
            .ok_or_else(|| field_err("risk", "required for this experiment kind"))
    }

    pub fn require_horizon(&self) -> Result<f64, ConfigError> {
        self.horizon
            .ok_or_else(|| field_err("mc.horizon", "required for this experiment kind"))
    }

    /// Kind-specific evaluation block, parsed on demand.
    pub fn eval_block<T: for<'de> Deserialize<'de> + Default>(&self) -> Result<T, ConfigError> {
        match &self.raw.eval {
            None => Ok(T::default()),
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| field_err("eval", e.to_string())),
        }
    }

    pub fn mc_config(&self, steps: usize, workers: Option<usize>) -> rspic::McConfig {
        let mut cfg = rspic::McConfig::new(self.paths, self.dt, steps, self.seed)
            .expect("validated mc block");
        cfg = cfg.with_worker_hint(workers);
        if let Some(b) = self.divergence_bound {
            cfg = cfg.with_divergence_bound(b);
        }
        cfg
    }
}

fn derive_psi(model: &DiffusionModel, r: &DMatrix<f64>) -> Result<f64, String> {
    let n = model.state_dim();
    let probes = vec![
        DVector::zeros(n),
        DVector::from_element(n, 1.0),
        DVector::from_element(n, -2.0),
    ];
    compute_psi(model, r, &probes, rspic::risk::DEFAULT_PSI_TOL).map_err(|e| e.to_string())
}

/// Human-readable validation report with the derived quantities.
pub fn validation_report(cfg: &ResolvedConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("kind: {}\n", cfg.kind.as_str()));
    out.push_str(&format!(
        "system: n = {}, m = {}, p = {}\n",
        cfg.model.state_dim(),
        cfg.model.control_dim(),
        cfg.model.noise_dim()
    ));
    if let Some(p) = &cfg.params {
        out.push_str(&format!(
            "risk: phi = {}, psi = {}, lambda = {}, exponent A = {}\n",
            p.phi, p.psi, p.lambda, p.exponent
        ));
    }
    out.push_str(&format!(
        "mc: paths = {}, dt = {}, seed = {}\n",
        cfg.paths, cfg.dt, cfg.seed
    ));
    if let Some(h) = cfg.horizon {
        out.push_str(&format!("horizon: {h}\n"));
    }
    if let (Some(t1), Some(t2)) = (cfg.t1, cfg.t2) {
        out.push_str(&format!("slope horizons: T1 = {t1}, T2 = {t2}\n"));
    }
    if cfg.alpha > 0.0 {
        let tail = rspic::estimators::DEFAULT_TAIL_EPS;
        out.push_str(&format!(
            "discount: alpha = {}, truncation horizon = {:.4} (tail {:.0e})\n",
            cfg.alpha,
            (1.0 / tail).ln() / cfg.alpha,
            tail
        ));
    }
    out
}
