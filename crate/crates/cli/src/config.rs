use std::ffi::OsString;
use std::path::PathBuf;

use alm_core::Error;
use clap::parser::ValueSource;
use clap::{CommandFactory, FromArgMatches};
use serde_json::Value;

use crate::args::Cli;

pub enum Failure {
    Usage(clap::Error),
    Core(Error),
}

impl From<clap::Error> for Failure {
    fn from(e: clap::Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Parse `argv`, filling any flag not given on the command line from the
/// `--config` JSON object.
///
/// Config values are turned back into `--flag=value` arguments so they go
/// through exactly the same parsing and validation as typed flags.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, Failure> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&argv)?;
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let Some(path) = sub.get_one::<PathBuf>("config") else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    let Value::Object(entries) = serde_json::from_str::<Value>(&text).map_err(Error::from)? else {
        return Err(Error::Config(format!("{} must hold a JSON object", path.display())).into());
    };

    let sub_cmd = cmd.find_subcommand(name).expect("matched subcommand exists");
    let mut argv = argv;
    for (key, value) in entries {
        let long = key.replace('_', "-");
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(long.as_str()) && a.get_id() != "config")
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?} for {name}")))?;
        if sub.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let bad = || Error::Config(format!("config key {key:?} has an unusable value {value}"));
        if arg.get_action().takes_values() {
            let text = match &value {
                Value::Null => continue,
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                _ => return Err(bad().into()),
            };
            argv.push(format!("--{long}={text}").into());
        } else {
            match value {
                Value::Bool(true) => argv.push(format!("--{long}").into()),
                Value::Bool(false) | Value::Null => {}
                _ => return Err(bad().into()),
            }
        }
    }
    let matches = cmd.try_get_matches_from(&argv)?;
    Ok(Cli::from_arg_matches(&matches)?)
}
