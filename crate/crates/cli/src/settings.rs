//! Layered settings: command line over config file over environment over
//! built-in defaults, with the origin of every value kept for the echo.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

/// Where an effective value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    CommandLine,
    ConfigFile,
    Environment,
    Default,
    Unset,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::CommandLine => "command line",
            Source::ConfigFile => "config file",
            Source::Environment => "environment",
            Source::Default => "default",
            Source::Unset => "unset",
        })
    }
}

/// Declaration of one setting of a subcommand.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub flag: bool,
    pub env: Option<&'static str>,
}

pub const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help, flag: false, env: None }
}

pub const fn flag(name: &'static str, help: &'static str) -> Key {
    Key { name, default: Some("false"), help, flag: true, env: None }
}

pub const fn env_key(name: &'static str, env: &'static str, help: &'static str) -> Key {
    Key { name, default: None, help, flag: false, env: Some(env) }
}

pub fn add_keys(mut cmd: Command, keys: &[Key]) -> Command {
    for k in keys {
        let mut arg = Arg::new(k.name).long(k.name).help(k.help);
        if k.flag {
            arg = arg.action(ArgAction::SetTrue);
        } else {
            arg = arg.value_name("VALUE").action(ArgAction::Set).allow_negative_numbers(true);
        }
        if let Some(d) = k.default.filter(|_| !k.flag) {
            arg = arg.help(format!("{} [default: {d}]", k.help));
        }
        cmd = cmd.arg(arg);
    }
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value file with defaults for any of the flags above"),
    )
}

/// Parses a config file of `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str, keys: &[Key]) -> Result<BTreeMap<String, String>, Vec<String>> {
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("config line {}: expected key=value", i + 1));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if !keys.iter().any(|key| key.name == k) {
            errors.push(format!("config line {}: unknown key '{k}'", i + 1));
            continue;
        }
        out.insert(k.to_string(), v.to_string());
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub key: &'static str,
    pub value: Option<String>,
    pub source: Source,
}

/// Effective settings of one invocation.
#[derive(Clone, Debug)]
pub struct Settings {
    pub command: &'static str,
    pub entries: Vec<Entry>,
    errors: Vec<String>,
}

impl Settings {
    pub fn resolve(
        command: &'static str,
        keys: &[Key],
        matches: &ArgMatches,
        file: &BTreeMap<String, String>,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Settings {
        let mut entries = Vec::with_capacity(keys.len());
        for k in keys {
            let cli = if k.flag {
                (matches.value_source(k.name) == Some(ValueSource::CommandLine)).then(|| "true".to_string())
            } else {
                matches.get_one::<String>(k.name).cloned()
            };
            let (value, source) = if let Some(v) = cli {
                (Some(v), Source::CommandLine)
            } else if let Some(v) = file.get(k.name) {
                (Some(v.clone()), Source::ConfigFile)
            } else if let Some(v) = k.env.and_then(env) {
                (Some(v), Source::Environment)
            } else if let Some(d) = k.default {
                (Some(d.to_string()), Source::Default)
            } else {
                (None, Source::Unset)
            };
            entries.push(Entry { key: k.name, value, source });
        }
        Settings { command, entries, errors: Vec::new() }
    }

    fn entry(&self, key: &str) -> &Entry {
        self.entries.iter().find(|e| e.key == key).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entry(key).value.as_deref()
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.entry(key).value.is_some()
    }

    pub fn source(&self, key: &str) -> Source {
        self.entry(key).source
    }

    /// Parses `key`, recording a message on failure.
    pub fn get<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?.to_string();
        match raw.parse::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("--{key} '{raw}': {e}"));
                None
            }
        }
    }

    pub fn required<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        if !self.is_set(key) {
            self.errors.push(format!("--{key} is required"));
            return None;
        }
        self.get(key)
    }

    pub fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn required_path(&mut self, key: &str) -> Option<PathBuf> {
        if !self.is_set(key) {
            self.errors.push(format!("--{key} is required"));
        }
        self.path(key)
    }

    pub fn flag(&mut self, key: &str) -> bool {
        self.get::<bool>(key).unwrap_or(false)
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Option<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?.to_string();
        let mut out = Vec::new();
        for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.parse::<T>() {
                Ok(v) => out.push(v),
                Err(e) => {
                    self.errors.push(format!("--{key} item '{part}': {e}"));
                    return None;
                }
            }
        }
        if out.is_empty() {
            self.errors.push(format!("--{key} is empty"));
            return None;
        }
        Some(out)
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    /// All recorded problems joined into one message.
    pub fn finish(&mut self) -> Result<(), String> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(std::mem::take(&mut self.errors).join("; "))
        }
    }

    /// One `# key = value (source)` line per setting.
    pub fn echo(&self) -> String {
        let width = self.entries.iter().map(|e| e.key.len()).max().unwrap_or(0);
        let mut s = format!("# tkl {}\n", self.command);
        for e in &self.entries {
            let v = e.value.as_deref().unwrap_or("-");
            s.push_str(&format!("# {:width$} = {v} ({})\n", e.key, e.source));
        }
        s
    }
}
