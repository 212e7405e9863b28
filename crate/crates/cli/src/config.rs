//! Flat `key=value` config files. Keys are long flag names (`-` or `_`);
//! anything given on the command line wins over the file.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, CommandFactory, FromArgMatches};
use sst_core::io::Meta;

use crate::args::Cli;
use crate::Failure;

/// Parses `argv`, folding in the config file named by `--config`.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, Failure> {
    // Lenient first pass: required flags may still come from the file.
    let matches = Cli::command().ignore_errors(true).try_get_matches_from(&argv)?;
    let Some(path) = matches.get_one::<std::path::PathBuf>("config").cloned() else {
        let matches = Cli::command().try_get_matches_from(&argv)?;
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let file = read_file(&path)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let root = Cli::command();
    let cmd = root.find_subcommand(name).expect("parsed subcommand exists");

    let mut argv = argv;
    for (key, value) in file.iter() {
        let long = key.replace('_', "-");
        if long == "config" {
            return Err(Failure::Usage(format!("{}: `config` cannot be set from a config file", path.display())));
        }
        let arg = cmd
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()) && !a.is_hide_set())
            .ok_or_else(|| Failure::Usage(format!("{}: unknown key `{key}` for `sst {name}`", path.display())))?;
        let id = arg.get_id().as_str();
        let local = cmd.get_arguments().any(|a| a.get_id() == arg.get_id());
        let source = if local { sub.value_source(id) } else { matches.value_source(id) };
        let from_cli = matches!(source, Some(ValueSource::CommandLine));
        if from_cli {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            let on: bool = value
                .parse()
                .map_err(|_| Failure::Usage(format!("{}: `{key}` expects true or false, got `{value}`", path.display())))?;
            if on {
                argv.push(format!("--{long}").into());
            }
        } else {
            argv.push(format!("--{long}").into());
            argv.push(value.into());
        }
    }
    let matches = Cli::command().try_get_matches_from(&argv)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

fn read_file(path: &Path) -> Result<Meta, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
    }
    Ok(Meta::read(path)?)
}

/// Prints the resolved settings of a run in config-file syntax.
pub fn echo(command: &str, settings: &Meta) {
    println!("# sst {command}: resolved config");
    print!("{}", settings.render());
    println!("# end config");
}
