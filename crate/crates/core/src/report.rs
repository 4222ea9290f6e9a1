//! CSV and JSON outputs.
//!
//! Every CSV has a header row and a trailing `config_hash` column. Floats are
//! written as `{:.16e}` (17 significant digits), which round-trips any `f64`.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{AblationRow, AmortizationReport, EvalReport, SteinReport, SweepReport};
use crate::training::{CurveRow, Dataset};

/// Round-trip formatting for one float. Non-finite values print as
/// `NaN`, `inf`, or `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// A CSV table whose rows are already formatted.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV text with `config_hash` appended to the header and every row.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let with_hash = |r: &[String], last: &str| r.iter().map(String::as_str).chain([last]).map(str::to_owned).collect::<Vec<_>>();
        w.write_record(with_hash(&self.header, "config_hash")).expect("in-memory write");
        for r in &self.rows {
            w.write_record(with_hash(r, config_hash)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(config_hash)).map_err(|e| Error::io(path, e))
    }
}

pub fn curve_table(curve: &[CurveRow]) -> Table {
    let mut t = Table::new(&["samples_seen", "batch_loss", "epoch", "val_loss", "lr"]);
    for r in curve {
        t.push(vec![r.samples_seen.to_string(), fmt_opt(r.batch_loss), r.epoch.to_string(), fmt_opt(r.val_loss), fmt_f64(r.lr)]);
    }
    t
}

pub fn vrf_table(report: &EvalReport) -> Table {
    let mut t = Table::new(&[
        "obs_id",
        "component",
        "var_h",
        "var_hg",
        "vrf",
        "corr",
        "raw_estimate",
        "cv_estimate",
        "n_samples",
        "seed",
    ]);
    for r in &report.rows {
        t.push(vec![
            r.obs_id.to_string(),
            r.component.to_string(),
            fmt_f64(r.var_h),
            fmt_f64(r.var_hg),
            fmt_f64(r.vrf),
            fmt_f64(r.corr),
            fmt_f64(r.raw_estimate),
            fmt_f64(r.cv_estimate),
            r.n_samples.to_string(),
            r.seed.to_string(),
        ]);
    }
    t
}

pub fn stein_table(report: &SteinReport) -> Table {
    let mut t = Table::new(&["obs_id", "statistic", "se", "z"]);
    for r in &report.rows {
        t.push(vec![r.obs_id.to_string(), fmt_f64(r.statistic), fmt_f64(r.se), fmt_f64(r.z)]);
    }
    t
}

pub fn sweep_table(report: &SweepReport) -> Table {
    let reference = match report.reference {
        crate::evaluation::Reference::Analytic => "analytic",
        crate::evaluation::Reference::Mala => "mala",
    };
    let mut t = Table::new(&["n", "vrf", "mse_raw", "mse_cv", "replications", "reference"]);
    for r in &report.rows {
        t.push(vec![
            r.n.to_string(),
            fmt_f64(r.vrf),
            fmt_f64(r.mse_raw),
            fmt_f64(r.mse_cv),
            r.replications.to_string(),
            reference.to_string(),
        ]);
    }
    t
}

pub fn ablation_table(rows: &[AblationRow]) -> Table {
    let mut t = Table::new(&["ensemble_size", "seed", "mean_vrf", "final_val_loss"]);
    for r in rows {
        t.push(vec![r.ensemble_size.to_string(), r.seed.to_string(), fmt_f64(r.mean_vrf), fmt_f64(r.final_val_loss)]);
    }
    t
}

pub fn amortization_table(report: &AmortizationReport) -> Table {
    let mut t = Table::new(&["label", "quantile", "obs_id", "component", "var_h", "var_hg", "vrf", "corr"]);
    for r in &report.report.rows {
        let o = &report.observations[r.obs_id];
        t.push(vec![
            o.label.clone(),
            fmt_f64(o.quantile),
            r.obs_id.to_string(),
            r.component.to_string(),
            fmt_f64(r.var_h),
            fmt_f64(r.var_hg),
            fmt_f64(r.vrf),
            fmt_f64(r.corr),
        ]);
    }
    t
}

/// Columns `x_0.., y_0.., score_0..` plus the split each row belongs to.
pub fn dataset_table(data: &Dataset) -> Table {
    let (d, m) = (data.x.cols(), data.y.cols());
    let mut header: Vec<String> = Vec::with_capacity(2 * d + m + 1);
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.extend((0..m).map(|j| format!("y_{j}")));
    header.extend((0..d).map(|j| format!("score_{j}")));
    header.push("split".into());
    let mut split = vec!["train"; data.len()];
    for &i in &data.validation {
        split[i] = "validation";
    }
    let mut t = Table::new(&header);
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x.row(i).iter().chain(data.y.row(i)).chain(data.score.row(i)).map(|&v| fmt_f64(v)).collect();
        row.push(split[i].to_string());
        t.push(row);
    }
    t
}

/// Pretty-printed JSON; non-finite floats become `null`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
