//! Sweep tables as CSV, one file per experiment.
//!
//! Reals are written with 17 significant digits (`{:.16e}`), so a re-parse
//! reproduces every value bit for bit; `inf`, `-inf` and `NaN` are spelled out
//! and a missing bound is an empty field.

use std::io::{Read, Write};

use crate::config::ExperimentId;
use crate::experiment::CellRow;

pub const HEADER: [&str; 9] =
    ["experiment", "beta", "sigma2", "mean_cost", "std_cost", "failure_fraction", "n_trials", "is_beta_star", "bound"];

#[derive(Debug, thiserror::Error)]
pub enum PlotDataError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed row {row}: {message}")]
    Malformed { row: usize, message: String },
}

pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

/// `null` for non-finite values.
pub fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

pub fn emit_plotdata<W: Write>(rows: &[CellRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| std::io::Error::other(e);
    w.write_record(HEADER).map_err(to_io)?;
    for r in rows {
        w.write_record([
            r.experiment.as_str().to_string(),
            format_f64(r.beta),
            format_f64(r.sigma2),
            format_f64(r.mean_cost),
            format_f64(r.std_cost),
            format_f64(r.failure_fraction),
            r.n_trials.to_string(),
            r.is_beta_star.to_string(),
            r.bound.map(format_f64).unwrap_or_default(),
        ])
        .map_err(to_io)?;
    }
    w.flush()
}

pub fn parse_plotdata<R: Read>(input: R) -> Result<Vec<CellRow>, PlotDataError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != HEADER {
        return Err(PlotDataError::Malformed { row: 0, message: format!("unexpected header {header:?}") });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| PlotDataError::Malformed { row: i + 1, message };
        let real = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(format!("{}: {e}", HEADER[k])));
        rows.push(CellRow {
            experiment: ExperimentId::parse(&rec[0]).map_err(|e| bad(e.to_string()))?,
            beta: real(1)?,
            sigma2: real(2)?,
            mean_cost: real(3)?,
            std_cost: real(4)?,
            failure_fraction: real(5)?,
            n_trials: rec[6].parse().map_err(|e| bad(format!("n_trials: {e}")))?,
            is_beta_star: rec[7].parse().map_err(|e| bad(format!("is_beta_star: {e}")))?,
            bound: if rec[8].is_empty() { None } else { Some(real(8)?) },
        });
    }
    Ok(rows)
}
