//! Machine-readable experiment output: a fixed-schema `results.csv` plus a
//! `meta.json` with the resolved configuration and timings.
//!
//! Numeric fields are printed with 17 significant digits so reruns are
//! byte-comparable and values round-trip exactly.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// One evaluation-point result. `pass` is `None` for informational rows
/// that carry no criterion.
#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub kind: &'static str,
    pub point: String,
    pub metric: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub ess: Option<f64>,
    pub oracle: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
}

impl ResultRow {
    pub fn new(kind: &'static str, point: impl Into<String>, metric: impl Into<String>, estimate: f64) -> Self {
        Self {
            kind,
            point: point.into(),
            metric: metric.into(),
            estimate,
            std_error: None,
            ess: None,
            oracle: None,
            tolerance: None,
            pass: None,
        }
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }

    pub fn with_ess(mut self, ess: f64) -> Self {
        self.ess = Some(ess);
        self
    }

    pub fn with_oracle(mut self, oracle: f64) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = Some(tol);
        self
    }

    pub fn judge(mut self, pass: bool) -> Self {
        self.pass = Some(pass);
        self
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub const CSV_HEADER: &str =
    "kind,point,metric,estimate,std_error,ess,oracle,tolerance,pass,config_digest";

pub fn write_results_csv<W: Write>(
    mut w: W,
    rows: &[ResultRow],
    digest: &str,
) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.kind,
            r.point,
            r.metric,
            fmt_num(r.estimate),
            fmt_opt(r.std_error),
            fmt_opt(r.ess),
            fmt_opt(r.oracle),
            fmt_opt(r.tolerance),
            r.pass.map(|p| p.to_string()).unwrap_or_default(),
            digest
        )?;
    }
    Ok(())
}

/// Canonical digest of a config: JSON re-serialized with sorted keys and
/// normalized whitespace, hashed with SHA-256.
pub fn config_digest(json_text: &str) -> Result<String, serde_json::Error> {
    let value: serde_json::Value = serde_json::from_str(json_text)?;
    let canonical = serde_json::to_string(&value)?;
    let hash = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(64);
    for b in hash {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

#[derive(Serialize)]
pub struct Meta<'a> {
    pub kind: &'static str,
    pub config_digest: &'a str,
    pub library_version: &'a str,
    pub resolved_config: &'a serde_json::Value,
    pub derived: serde_json::Value,
    pub timing_seconds: f64,
    pub criteria_pass: bool,
    pub rows: usize,
}

pub fn write_outputs(
    out_dir: &Path,
    rows: &[ResultRow],
    digest: &str,
    meta: &Meta<'_>,
) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let csv = std::fs::File::create(out_dir.join("results.csv"))?;
    write_results_csv(std::io::BufWriter::new(csv), rows, digest)?;
    let meta_file = std::fs::File::create(out_dir.join("meta.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(meta_file), meta)?;
    Ok(())
}

/// True when every criterion row passed (informational rows are ignored).
pub fn all_pass(rows: &[ResultRow]) -> bool {
    rows.iter().all(|r| r.pass.unwrap_or(true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_whitespace_invariant() {
        let a = config_digest(r#"{"kind":"jensen","mc":{"seed":1}}"#).unwrap();
        let b = config_digest("{\n  \"mc\": {\"seed\": 1},\n  \"kind\": \"jensen\"\n}").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn csv_rows_are_stable() {
        let rows = vec![ResultRow::new("jensen", "beta=0.5", "direction-holds", 20.0)
            .with_oracle(20.0)
            .with_tolerance(19.0)
            .judge(true)];
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &rows, "abc").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.contains("2.0000000000000000e1"));
        assert!(text.contains(",true,abc"));
    }
}
