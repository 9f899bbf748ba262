//! Flat TOML config files. Each key is a long flag name of the chosen
//! subcommand; keys are turned into flags and appended to the command line
//! unless that flag was given explicitly.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory};
use subface::Error;
use toml::Value;

use crate::cli::Cli;

pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let matches = Cli::command().try_get_matches_from(&argv).unwrap_or_else(|e| e.exit());
    let Some(path) = matches.get_one::<PathBuf>("config") else {
        return Ok(argv);
    };
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(argv);
    };
    let table = read_table(path)?;
    let mut argv = argv;
    argv.extend(flags_from_table(&table, name, sub)?);
    Ok(argv)
}

fn read_table(path: &Path) -> Result<toml::Table, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn flags_from_table(table: &toml::Table, name: &str, sub: &ArgMatches) -> Result<Vec<OsString>, Error> {
    let root = Cli::command();
    let cmd = root.find_subcommand(name).expect("parsed subcommand exists");
    let mut out = Vec::new();
    for (key, value) in table {
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && a.get_id() != "config");
        let Some(arg) = arg else {
            let elsewhere = root
                .get_subcommands()
                .any(|c| c.get_arguments().any(|a| a.get_long() == Some(key.as_str())));
            if elsewhere {
                log::debug!("config key `{key}` does not apply to `{name}`");
                continue;
            }
            return Err(Error::config(format!("unknown config key `{key}`")));
        };
        if sub.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{key}");
        if arg.get_action().takes_values() {
            out.push(flag.into());
            out.push(render(key, value)?.into());
        } else {
            match value {
                Value::Boolean(true) => out.push(flag.into()),
                Value::Boolean(false) => {}
                _ => return Err(Error::config(format!("config key `{key}` must be true or false"))),
            }
        }
    }
    Ok(out)
}

fn scalar(key: &str, value: &Value) -> Result<String, Error> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(Error::config(format!("config key `{key}` has an unsupported value"))),
    }
}

fn render(key: &str, value: &Value) -> Result<String, Error> {
    match value {
        Value::Array(items) => Ok(items
            .iter()
            .map(|v| scalar(key, v))
            .collect::<Result<Vec<_>, _>>()?
            .join(",")),
        other => scalar(key, other),
    }
}
