//! Config-file layering. Clap resolves flags and environment; values from
//! the file are appended as flags only for arguments still at their
//! default, then the command line is parsed again.

use std::ffi::OsString;
use std::path::Path;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde_json::{Map, Value};

use crate::Cli;

fn config_error(msg: impl std::fmt::Display) -> clap::Error {
    Cli::command().error(ErrorKind::InvalidValue, msg)
}

fn load_table(path: &Path) -> Result<Map<String, Value>, clap::Error> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(config_error(format!("config {}: expected a table", path.display()))),
    }
}

fn scalar(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Appends `--key value` for one config entry unless the flag or its
/// environment variable already supplied a value.
fn push_entry(
    command: &clap::Command,
    matches: &ArgMatches,
    key: &str,
    value: &Value,
    extra: &mut Vec<OsString>,
) -> Result<(), clap::Error> {
    let long = key.replace('_', "-");
    let arg = command
        .get_arguments()
        .find(|a| a.get_long() == Some(long.as_str()) && long != "config")
        .ok_or_else(|| config_error(format!("unknown config key {key:?} for `{}`", command.get_name())))?;
    if matches!(
        matches.value_source(arg.get_id().as_str()),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    ) {
        return Ok(());
    }
    let flag = OsString::from(format!("--{long}"));
    match value {
        Value::Bool(true) => extra.push(flag),
        Value::Bool(false) => {}
        Value::Array(items) => {
            for item in items {
                let v = scalar(item).ok_or_else(|| config_error(format!("config key {key:?}: unsupported list item")))?;
                extra.push(flag.clone());
                extra.push(v.into());
            }
        }
        other => {
            let v = scalar(other).ok_or_else(|| config_error(format!("config key {key:?}: unsupported value")))?;
            extra.push(flag);
            extra.push(v.into());
        }
    }
    Ok(())
}

pub(crate) fn parse_layered(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let root = Cli::command();
    let strict = |args: Vec<OsString>| Cli::command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m));
    // lenient pass: required flags may still come from the config file
    let Ok(matches) = root.clone().ignore_errors(true).try_get_matches_from(&args) else {
        return strict(args);
    };
    let Some(path) = matches.get_one::<std::path::PathBuf>("config").cloned() else {
        return strict(args);
    };
    let table = load_table(&path)?;
    let active = matches.subcommand();
    let mut extra = Vec::new();
    for (key, value) in &table {
        if let Value::Object(section) = value {
            let Some(sub) = root.find_subcommand(key) else {
                return Err(config_error(format!("unknown config section [{key}]")));
            };
            if let Some((name, sub_matches)) = active {
                if name == key {
                    for (k, v) in section {
                        push_entry(sub, sub_matches, k, v, &mut extra)?;
                    }
                }
            }
        } else if active.is_some() {
            push_entry(&root, &matches, key, value, &mut extra)?;
        }
    }
    let mut layered = args;
    layered.extend(extra);
    strict(layered)
}
