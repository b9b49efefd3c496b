use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use patchlab_core::RNG_ALGORITHM;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Bad invocation discovered after parsing; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// What every run writes as `config.json`; also accepted by `--config` and `replay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub command: String,
    pub args: Value,
    pub patchlab_version: String,
    pub rng: String,
}

impl ResolvedConfig {
    pub fn new<T: Serialize>(command: &str, args: &T) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            args: serde_json::to_value(args)?,
            patchlab_version: env!("CARGO_PKG_VERSION").to_string(),
            rng: RNG_ALGORITHM.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn args_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.args.clone())
            .map_err(|e| usage(format!("config arguments for {}: {e}", self.command)))
    }
}

/// Fills every flag not given on the command line from the config file.
///
/// The file is either a resolved config (`command`, `args`, ...) or a bare
/// object of flag values keyed by their snake_case names. When one of an
/// exclusive pair was given on the command line, the file's value for the
/// other is ignored.
pub fn merge_config<T: Serialize + DeserializeOwned>(
    args: &T,
    matches: &ArgMatches,
    file: &Path,
    command: &str,
    exclusive: &[(&str, &str)],
) -> Result<T> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let root: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{} is not valid JSON: {e}", file.display())))?;
    let from_file = match &root {
        Value::Object(obj) if obj.contains_key("args") && obj.contains_key("command") => {
            let recorded = obj["command"].as_str().unwrap_or_default();
            if recorded != command {
                return Err(usage(format!(
                    "{} was written for `{recorded}`, not `{command}`",
                    file.display()
                )));
            }
            obj["args"].clone()
        }
        other => other.clone(),
    };
    let Value::Object(from_file) = from_file else {
        return Err(usage(format!("{}: expected a JSON object of flag values", file.display())));
    };

    let mut merged = serde_json::to_value(args)?;
    let fields = merged.as_object_mut().expect("argument structs serialize to objects");
    let on_cli = |key: &str| matches.value_source(key) == Some(ValueSource::CommandLine);
    for (key, value) in from_file {
        if !fields.contains_key(&key) {
            return Err(usage(format!("{}: unknown option {key:?} for `{command}`", file.display())));
        }
        if on_cli(&key) {
            continue;
        }
        let partner_given = exclusive.iter().any(|&(a, b)| (key == a && on_cli(b)) || (key == b && on_cli(a)));
        if !partner_given {
            fields.insert(key, value);
        }
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("{}: {e}", file.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{CommandFactory, FromArgMatches, Parser};

    #[derive(Debug, Parser, Serialize, Deserialize, PartialEq)]
    struct Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, conflicts_with = "beta")]
        ratio: Option<f64>,
        #[arg(long)]
        beta: Option<String>,
    }

    fn merged(argv: &[&str], file: &str) -> Result<Demo> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("c.json");
        fs::write(&path, file)?;
        let matches = Demo::command().try_get_matches_from(argv)?;
        let demo = Demo::from_arg_matches(&matches)?;
        merge_config(&demo, &matches, &path, "demo", &[("ratio", "beta")])
    }

    #[test]
    fn command_line_beats_file_beats_default() {
        let d = merged(&["demo", "--seed", "5"], r#"{"seed": 9, "ratio": 0.25}"#).unwrap();
        assert_eq!(d, Demo { seed: 5, ratio: Some(0.25), beta: None });
        let d = merged(&["demo"], r#"{"seed": 9}"#).unwrap();
        assert_eq!(d.seed, 9);
    }

    #[test]
    fn exclusive_partner_on_command_line_wins() {
        let d = merged(&["demo", "--beta", "1,1"], r#"{"ratio": 0.25}"#).unwrap();
        assert_eq!(d.ratio, None);
        assert_eq!(d.beta.as_deref(), Some("1,1"));
    }

    #[test]
    fn resolved_config_form_and_mismatch() {
        let ok = r#"{"command":"demo","args":{"seed":3},"patchlab_version":"0","rng":"x"}"#;
        assert_eq!(merged(&["demo"], ok).unwrap().seed, 3);
        let other = r#"{"command":"mix","args":{"seed":3},"patchlab_version":"0","rng":"x"}"#;
        assert!(merged(&["demo"], other).unwrap_err().is::<UsageError>());
        assert!(merged(&["demo"], r#"{"nope": 1}"#).unwrap_err().is::<UsageError>());
    }
}
