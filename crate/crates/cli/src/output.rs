//! Result files: a CSV time series with one metrics record per row and a
//! JSON report.

use std::fs;
use std::path::Path;

use cfcredit::harness::{MetricsRecord, Report, RunOutput};

use crate::error::{io_err, CliError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

const FIXED_COLUMNS: [&str; 11] = [
    "update",
    "mean_return",
    "router_accuracy",
    "oracle_accuracy",
    "regret",
    "routing_entropy",
    "routing_entropy_nats",
    "brier",
    "specialization",
    "tau",
    "epsilon",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Columns are fixed, followed by `share_0..share_{K-1}` when the records
/// carry selection shares.
pub fn render_metrics(series: &[MetricsRecord]) -> Result<Vec<u8>> {
    let n_shares = series.iter().filter_map(|r| r.selection_shares.as_ref().map(Vec::len)).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..n_shares).map(|k| format!("share_{k}")));
    w.write_record(&header)?;
    for r in series {
        let mut row = vec![
            r.update.to_string(),
            r.mean_return.to_string(),
            r.router_accuracy.to_string(),
            r.oracle_accuracy.to_string(),
            r.regret.to_string(),
            opt(r.routing_entropy),
            opt(r.routing_entropy_nats),
            opt(r.brier),
            opt(r.specialization),
            r.tau.to_string(),
            r.epsilon.to_string(),
        ];
        match &r.selection_shares {
            Some(s) if s.len() == n_shares => row.extend(s.iter().map(f64::to_string)),
            Some(_) => return Err(csv_format(0, "records disagree on the number of agents")),
            None => row.extend((0..n_shares).map(|_| String::new())),
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| csv_format(0, &e.to_string()))
}

fn csv_format(line: usize, message: &str) -> CliError {
    CliError::Format { what: "metrics csv", line, message: message.into() }
}

pub fn parse_metrics(data: &[u8]) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(data);
    let header = r.headers()?.clone();
    if header.len() < FIXED_COLUMNS.len() || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b) {
        return Err(csv_format(1, "unexpected columns"));
    }
    let n_shares = header.len() - FIXED_COLUMNS.len();
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| csv_format(line, &format!("column {} is not a number", &header[k])))
        };
        let maybe = |k: usize| -> Result<Option<f64>> { if rec[k].is_empty() { Ok(None) } else { num(k).map(Some) } };
        let shares: Vec<Option<f64>> = (0..n_shares).map(|k| maybe(FIXED_COLUMNS.len() + k)).collect::<Result<_>>()?;
        let selection_shares = if n_shares > 0 && shares.iter().all(Option::is_some) {
            Some(shares.into_iter().flatten().collect())
        } else {
            None
        };
        out.push(MetricsRecord {
            update: rec[0].parse().map_err(|_| csv_format(line, "update is not an integer"))?,
            mean_return: num(1)?,
            router_accuracy: num(2)?,
            oracle_accuracy: num(3)?,
            regret: num(4)?,
            routing_entropy: maybe(5)?,
            routing_entropy_nats: maybe(6)?,
            brier: maybe(7)?,
            specialization: maybe(8)?,
            tau: num(9)?,
            epsilon: num(10)?,
            selection_shares,
        });
    }
    Ok(out)
}

pub fn render_report(report: &Report) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Writes `metrics.csv` and `report.json` into `dir`, creating it if needed.
pub fn write_results(dir: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = dir.join(METRICS_FILE);
    fs::write(&metrics, render_metrics(&run.series)?).map_err(io_err(&metrics))?;
    let report = dir.join(REPORT_FILE);
    fs::write(&report, render_report(&run.report)?).map_err(io_err(&report))
}
