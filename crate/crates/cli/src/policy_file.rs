//! Plain-text policy parameters.
//!
//! ```text
//! cfcredit-policy 1
//! n_agents 2 vocab_size 3 context_dim 3 conditioning autoregressive
//! agent 0 rows 6
//! 0.1 -0.2 0
//! ...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cfcredit::math::Matrix;
use cfcredit::policy::{check_team, AgentPolicy, Conditioning};

use crate::error::{io_err, CliError, Result};

const MAGIC: &str = "cfcredit-policy 1";

pub fn render_policies(policies: &[AgentPolicy]) -> Result<String> {
    let mode = check_team(policies)?;
    let first = &policies[0];
    let mut out = String::new();
    let mode = match mode {
        Conditioning::Independent => "independent",
        Conditioning::Autoregressive => "autoregressive",
    };
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(
        out,
        "n_agents {} vocab_size {} context_dim {} conditioning {mode}",
        policies.len(),
        first.vocab_size,
        first.context_dim
    )
    .unwrap();
    for p in policies {
        let theta = p.theta();
        writeln!(out, "agent {} rows {}", p.agent, theta.rows()).unwrap();
        for r in 0..theta.rows() {
            let row: Vec<String> = (0..theta.cols()).map(|c| theta.get(r, c).to_string()).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    Ok(out)
}

fn bad(line: usize, message: impl Into<String>) -> CliError {
    CliError::Format { what: "policy file", line, message: message.into() }
}

fn header_value(fields: &[&str], key: &str, line: usize) -> Result<String> {
    fields
        .windows(2)
        .find(|w| w[0] == key)
        .map(|w| w[1].to_string())
        .ok_or_else(|| bad(line, format!("missing `{key}`")))
}

pub fn parse_policies(text: &str) -> Result<Vec<AgentPolicy>> {
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        Some((n, _)) => return Err(bad(n, format!("expected `{MAGIC}`"))),
        None => return Err(bad(1, "empty file")),
    }
    let (n, header) = lines.next().ok_or_else(|| bad(2, "missing header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let num = |key| -> Result<usize> {
        header_value(&fields, key, n)?.parse().map_err(|_| bad(n, format!("`{key}` is not an integer")))
    };
    let (k, v, d) = (num("n_agents")?, num("vocab_size")?, num("context_dim")?);
    let conditioning = match header_value(&fields, "conditioning", n)?.as_str() {
        "independent" => Conditioning::Independent,
        "autoregressive" => Conditioning::Autoregressive,
        other => return Err(bad(n, format!("unknown conditioning `{other}`"))),
    };
    let mut policies = Vec::with_capacity(k);
    for i in 0..k {
        let policy = AgentPolicy::new(i, conditioning, d, k, v);
        let rows = policy.theta().rows();
        let (n, line) = lines.next().ok_or_else(|| bad(0, format!("missing agent {i}")))?;
        if line != format!("agent {i} rows {rows}") {
            return Err(bad(n, format!("expected `agent {i} rows {rows}`")));
        }
        let mut data = Vec::with_capacity(rows * v);
        for _ in 0..rows {
            let (n, line) = lines.next().ok_or_else(|| bad(0, format!("agent {i} is truncated")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| bad(n, format!("`{x}` is not a number"))))
                .collect::<Result<_>>()?;
            if row.len() != v {
                return Err(bad(n, format!("expected {v} values, found {}", row.len())));
            }
            data.extend(row);
        }
        policies.push(policy.with_theta(Matrix::from_vec(rows, v, data)?)?);
    }
    if let Some((n, _)) = lines.next() {
        return Err(bad(n, "trailing content"));
    }
    Ok(policies)
}

pub fn write_policies(path: &Path, policies: &[AgentPolicy]) -> Result<()> {
    fs::write(path, render_policies(policies)?).map_err(io_err(path))
}

pub fn read_policies(path: &Path) -> Result<Vec<AgentPolicy>> {
    parse_policies(&fs::read_to_string(path).map_err(io_err(path))?)
}
