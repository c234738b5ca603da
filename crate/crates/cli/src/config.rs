//! Flat `key=value` config files. Entries become flags of the selected subcommand unless the
//! flag is already on the command line.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {line:?}", n + 1);
        };
        let key = key.trim();
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        entries.push((key.replace('_', "-"), value.trim().to_string()));
    }
    Ok(entries)
}

pub fn load(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text)
}

/// The `--config` value, if present anywhere on the command line.
pub fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn takes_value(cmd: &Command, long: &str) -> bool {
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(long))
        .is_some_and(|a| a.get_action().takes_values())
}

/// Inserts config entries after the last subcommand name. Keys that the selected subcommand
/// does not accept are returned separately.
pub fn inject(argv: Vec<OsString>, entries: &[(String, String)], root: &Command) -> (Vec<OsString>, Vec<String>) {
    let mut cmd = root.clone();
    let mut insert_at = argv.len().min(1);
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy().into_owned();
        if s == "--" {
            break;
        }
        if let Some(long) = s.strip_prefix("--") {
            if !long.contains('=') && takes_value(&cmd, long) {
                i += 1;
            }
        } else if !s.starts_with('-') {
            match cmd.find_subcommand(&s) {
                Some(sub) => {
                    cmd = sub.clone();
                    insert_at = i + 1;
                }
                None => break,
            }
        }
        i += 1;
    }
    let present = |key: &str| {
        argv.iter().any(|a| {
            let s = a.to_string_lossy();
            s == format!("--{key}") || s.starts_with(&format!("--{key}="))
        })
    };
    let mut extra = Vec::new();
    let mut ignored = Vec::new();
    for (key, value) in entries {
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            ignored.push(key.clone());
            continue;
        };
        if present(key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(OsString::from(format!("--{key}")));
            extra.push(OsString::from(value));
        } else if value == "true" {
            extra.push(OsString::from(format!("--{key}")));
        }
    }
    let mut out = argv;
    out.splice(insert_at..insert_at, extra);
    (out, ignored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, ArgAction};

    fn root() -> Command {
        Command::new("noir")
            .arg(Arg::new("config").long("config"))
            .subcommand(
                Command::new("bounds").subcommand(
                    Command::new("token")
                        .arg(Arg::new("eps").long("eps"))
                        .arg(Arg::new("vocab-size").long("vocab-size"))
                        .arg(Arg::new("verbose").long("verbose").action(ArgAction::SetTrue)),
                ),
            )
    }

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parse_skips_comments_and_normalizes_keys() {
        let e = parse("# c\n\neps = 2\nvocab_size=10\n").unwrap();
        assert_eq!(e, vec![("eps".into(), "2".into()), ("vocab-size".into(), "10".into())]);
        assert!(parse("novalue\n").is_err());
    }

    #[test]
    fn flags_override_config() {
        let entries = parse("eps=2\nvocab-size=10\nverbose=true\nunused=1").unwrap();
        let (argv, ignored) = inject(os(&["noir", "bounds", "token", "--eps", "1"]), &entries, &root());
        assert_eq!(
            argv,
            os(&["noir", "bounds", "token", "--vocab-size", "10", "--verbose", "--eps", "1"])
        );
        assert_eq!(ignored, vec!["unused".to_string()]);
    }

    #[test]
    fn config_path_is_found() {
        assert_eq!(config_path(&os(&["noir", "--config", "a.cfg", "x"])), Some("a.cfg".into()));
        assert_eq!(config_path(&os(&["noir", "x", "--config=b.cfg"])), Some("b.cfg".into()));
        assert_eq!(config_path(&os(&["noir", "x"])), None);
    }
}
