//! `key = value` configuration files merged into the command line.

use std::path::{Path, PathBuf};

use clap::{ArgAction, Command};

use crate::error::CliError;

/// Returns `args` with the settings of the `--config` file appended for
/// every option not given on the command line.
pub fn merge(cmd: &Command, args: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let Some(sub_name) = subcommand(&args) else {
        return Ok(args);
    };
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(args);
    };
    let mut out = args.clone();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| CliError::Config { path: path.clone(), message: format!("line {}: {message}", line_no + 1) };
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key == "config" {
            return Err(err("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| err(format!("unknown key '{key}' for `{sub_name}`")))?;
        let flag = format!("--{key}");
        if given(&args, &flag) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value {
                "true" | "yes" | "1" => out.push(flag),
                "false" | "no" | "0" => {}
                other => return Err(err(format!("'{key}' expects true or false, got {other:?}"))),
            },
            _ => out.push(format!("{flag}={value}")),
        }
    }
    Ok(out)
}

fn given(args: &[String], flag: &str) -> bool {
    args.iter().any(|a| a == flag || a.strip_prefix(flag).is_some_and(|rest| rest.starts_with('=')))
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(Path::new(p).to_path_buf());
        }
    }
    None
}

/// The first positional argument, skipping the value of `--config`.
fn subcommand(args: &[String]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            it.next();
        } else if !a.starts_with('-') {
            return Some(a.clone());
        }
    }
    None
}
