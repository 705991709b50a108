//! The `tkl` command-line tool.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unexpected I/O or numerical failure |
//! | 2 | invalid configuration or usage |
//! | 3 | invalid input data or model file |
//! | 4 | training stopped before the duality gap closed (model still written) |
//! | 5 | an oracle check exceeded its tolerance |

mod commands;
pub mod settings;

use std::collections::BTreeMap;
use std::io::Write;

use clap::Command;
use tkl_core::TklError;

use settings::{parse_config_file, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NON_CONVERGENCE: i32 = 4;
pub const EXIT_ORACLE: i32 = 5;

/// Failure of a subcommand with its exit code.
#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub msg: String,
}

impl CmdError {
    pub fn config(msg: impl Into<String>) -> Self {
        CmdError { code: EXIT_CONFIG, msg: msg.into() }
    }
}

impl From<TklError> for CmdError {
    fn from(e: TklError) -> Self {
        let code = match &e {
            TklError::Config(_) | TklError::FoldsExceedSamples { .. } | TklError::QuadratureTooLarge(_) => EXIT_CONFIG,
            TklError::Parse { .. }
            | TklError::EmptyFile(_)
            | TklError::MoreThanTwoClasses { .. }
            | TklError::SingleClass { .. }
            | TklError::DimensionMismatch { .. }
            | TklError::VersionMismatch { .. }
            | TklError::ChecksumMismatch
            | TklError::ModelFormat { .. }
            | TklError::Io(_) => EXIT_DATA,
            TklError::NonConvergence { .. } => EXIT_NON_CONVERGENCE,
            TklError::EigenFailure(_) => EXIT_FAILURE,
        };
        CmdError { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError { code: EXIT_FAILURE, msg: e.to_string() }
    }
}

pub type CmdResult = Result<i32, CmdError>;

fn cli() -> Command {
    Command::new("tkl")
        .about("Tessellated kernel learning for SVM classification and regression")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(commands::SUBCOMMANDS.iter().map(|sc| settings::add_keys(Command::new(sc.name).about(sc.about), sc.keys)))
}

/// Runs the tool on `args` (without the program name). Regular output goes
/// to `out`; the configuration echo and diagnostics go to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with_env(args, out, err, &|k| std::env::var(k).ok())
}

pub fn run_with_env<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write, env: &dyn Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let mut app = cli();
    let matches = match app.try_get_matches_from_mut(std::iter::once("tkl".into()).chain(args.into_iter().map(Into::into))) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let sc = commands::SUBCOMMANDS.iter().find(|s| s.name == name).expect("known subcommand");
    let usage = app.find_subcommand_mut(name).expect("registered").render_usage().to_string();

    let file = match sub.get_one::<String>("config") {
        None => BTreeMap::new(),
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match parse_config_file(&text, sc.keys) {
                Ok(map) => map,
                Err(errors) => {
                    let _ = writeln!(err, "error: {}\n\n{usage}", errors.join("; "));
                    return EXIT_CONFIG;
                }
            },
            Err(e) => {
                let _ = writeln!(err, "error: cannot read config file {path}: {e}\n\n{usage}");
                return EXIT_CONFIG;
            }
        },
    };
    let settings = Settings::resolve(sc.name, sc.keys, sub, &file, env);
    match (sc.run)(settings, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.msg);
            if e.code == EXIT_CONFIG {
                let _ = writeln!(err, "\n{usage}");
            }
            e.code
        }
    }
}
