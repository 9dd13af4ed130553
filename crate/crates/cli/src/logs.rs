//! Newline-delimited JSON routing logs, one observation per line. Each
//! record carries its schema version.

use std::io::{BufRead, Write};

use cfcredit::mechanism::LoggedObservation;

use crate::error::{CliError, Result};

pub fn write_log<W: Write>(mut out: W, records: &[LoggedObservation]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<LoggedObservation>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CliError::Format { what: "log", line: n + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Format { what: "log", line: n + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}
