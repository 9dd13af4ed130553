//! TOML experiment configs.
//!
//! A config mirrors [`ExperimentConfig`]. The environment is either a preset
//! name (`env = "routing-basic"`), an inline table, or `env_file = "path"`
//! pointing at a TOML or JSON environment spec relative to the config file.

use std::fs;
use std::path::Path;

use cfcredit::env::EnvSpec;
use cfcredit::harness::{EnvSource, ExperimentConfig};

use crate::error::{io_err, CliError, Result};

pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let toml_err = |source| CliError::Toml { path: path.to_path_buf(), source };
    let mut table: toml::Table = toml::from_str(text).map_err(toml_err)?;
    let env_file = match table.remove("env_file") {
        None => None,
        Some(toml::Value::String(file)) => Some(file),
        Some(_) => return Err(format_err(path, "env_file must be a string")),
    };
    let spec = match env_file {
        Some(_) if table.contains_key("env") => return Err(format_err(path, "set either env or env_file, not both")),
        Some(file) => {
            let resolved = path.parent().unwrap_or_else(|| Path::new(".")).join(file);
            let spec = load_env(&resolved)?;
            table.insert("env".into(), toml::Value::String(spec.name.clone()));
            Some(spec)
        }
        None => None,
    };
    let mut config: ExperimentConfig = toml::Value::Table(table).try_into().map_err(toml_err)?;
    if let Some(spec) = spec {
        config.env = EnvSource::Spec(Box::new(spec));
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, path)
}

/// Reads an environment spec, as JSON when the extension is `.json` and TOML
/// otherwise.
pub fn load_env(path: &Path) -> Result<EnvSpec> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let spec: EnvSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).map_err(|source| CliError::Toml { path: path.to_path_buf(), source })?
    };
    spec.validate()?;
    Ok(spec)
}

fn format_err(path: &Path, message: &str) -> CliError {
    CliError::Format { what: "config", line: 0, message: format!("{}: {message}", path.display()) }
}
