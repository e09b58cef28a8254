use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command as App};
use vqrefine::{Error, Result};
use vqrefine_cli::config::{RunConfig, KEYS};
use vqrefine_cli::{run, Command};

fn app() -> App {
    let mut app = App::new("vqrefine")
        .about("Self-refinement of in-context grid-image generation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("TOML file with run settings; flags override its values"),
        );
    for key in KEYS {
        app = app.arg(
            Arg::new(key)
                .long(key)
                .global(true)
                .value_name("VALUE")
                .help(format!("override the `{key}` config key")),
        );
    }
    for c in Command::ALL {
        app = app.subcommand(App::new(c.name()));
    }
    app
}

/// Reads a flag value as a TOML literal, falling back to a bare string so
/// that `--task inpaint` and `--K_values 1,2` work unquoted.
fn flag_value(key: &str, raw: &str) -> toml::Value {
    if key == "out_dir" {
        return toml::Value::String(raw.to_string());
    }
    let literal = if key == "K_values" && !raw.trim_start().starts_with('[') { format!("[{raw}]") } else { raw.to_string() };
    match format!("v = {literal}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key is present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::from_file(&PathBuf::from(path))?,
        None => RunConfig::default(),
    };
    for key in KEYS {
        if let Some(raw) = m.get_one::<String>(key) {
            cfg.set(key, flag_value(key, raw))?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = app().get_matches();
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let command = Command::ALL.into_iter().find(|c| c.name() == name).expect("registered subcommand");
    match resolve(sub).and_then(|cfg| run(command, cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else {
        1
    }
}
