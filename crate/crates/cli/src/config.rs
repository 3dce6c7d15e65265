//! JSON run configs that mirror the command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Command, FromArgMatches};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Flags shared by every configurable subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Read all other options from this JSON file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write the resolved options to this JSON file before running.
    #[arg(long, value_name = "FILE")]
    pub save_config: Option<PathBuf>,
}

fn defaults<T: Args + FromArgMatches + Serialize>() -> Result<serde_json::Map<String, Value>, CliError> {
    let matches = T::augment_args(Command::new("defaults"))
        .try_get_matches_from(["defaults"])
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let value = serde_json::to_value(T::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::Usage("config must be a JSON object".into())),
    }
}

/// Reads a config file on top of the flag defaults. Unknown keys are rejected.
pub fn load<T>(path: &Path) -> Result<T, CliError>
where
    T: Args + FromArgMatches + Serialize + DeserializeOwned,
{
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let given: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let Value::Object(given) = given else {
        return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
    };
    let mut merged = defaults::<T>()?;
    for (key, value) in given {
        if !merged.contains_key(&key) {
            return Err(CliError::Usage(format!("{}: unknown key `{key}`", path.display())));
        }
        merged.insert(key, value);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn save<T: Serialize>(path: &Path, args: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(args).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Applies `--config` and `--save-config` for one subcommand.
pub fn resolve<T>(args: T, flags: &ConfigFlags, matches: &ArgMatches) -> Result<T, CliError>
where
    T: Args + FromArgMatches + Serialize + DeserializeOwned,
{
    let resolved = match &flags.config {
        Some(path) => {
            let command = T::augment_args(Command::new("args"));
            let explicit: Vec<String> = command
                .get_arguments()
                .map(|arg| arg.get_id().as_str())
                .filter(|id| matches.value_source(id) == Some(ValueSource::CommandLine))
                .map(|id| format!("--{}", id.replace('_', "-")))
                .collect();
            if !explicit.is_empty() {
                return Err(CliError::Usage(format!(
                    "--config cannot be combined with {}",
                    explicit.join(", ")
                )));
            }
            load(path)?
        }
        None => args,
    };
    if let Some(path) = &flags.save_config {
        save(path, &resolved)?;
    }
    Ok(resolved)
}
