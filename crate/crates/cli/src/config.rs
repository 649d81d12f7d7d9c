//! Run configuration from a TOML file plus command-line overrides.
//! Precedence: flags > file > `GROOD_SEED` (seed only) > built-in defaults.

use std::path::{Path, PathBuf};

use grood::pipeline::RunConfig;
use grood::synth::SynthParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "GROOD_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: Option<PathBuf>,
    pub run: RunConfig,
    pub synth: SynthParams,
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
    }
}

pub fn parse(text: &str, env_seed: Option<u64>) -> Result<FileConfig> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = env_seed {
        let run = table
            .entry("run")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(run) = run {
            run.entry("seed")
                .or_insert(toml::Value::Integer(seed as i64));
        }
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let env = env_seed()?;
    let Some(path) = path else {
        return parse("", env);
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = parse(&text, env)?;
    if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
        if m.is_relative() {
            cfg.manifest = Some(dir.join(m));
        }
    }
    Ok(cfg)
}
