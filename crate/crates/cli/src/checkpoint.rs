//! JSON checkpoints of a trainer, enough for a bit-exact resume.

use std::fs;
use std::path::Path;

use cfcredit::harness::{Trainer, TrainerState, VERSION};

use crate::error::{io_err, CliError, Result};

pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let text = serde_json::to_string(&trainer.checkpoint())?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let state: TrainerState = serde_json::from_str(&text)?;
    if state.version != VERSION {
        log::warn!("checkpoint written by version {}, running {}", state.version, VERSION);
    }
    Trainer::restore(state).map_err(CliError::from)
}
