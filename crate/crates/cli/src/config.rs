//! `key = value` config files.
//!
//! Keys are flag names without the leading dashes (`top-n` or `top_n`).
//! Blank lines and lines starting with `#` are ignored. Boolean flags take
//! `true` or `false`. Flags given on the command line win over the file.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::CommandFactory;

use crate::args::Cli;

/// Parses config text into `(key, value)` pairs, keys normalized to
/// dashed form.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key = value", n + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.push((key, value.to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn given_on_command_line(argv: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let with_value = format!("--{key}=");
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&with_value)
    })
}

/// Appends flags from the `--config` file, if any, for every key the
/// command line does not already set.
pub fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse_config(&text)?;

    let root = Cli::command();
    let sub_name = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .find(|a| root.find_subcommand(a).is_some());
    let sub = sub_name.as_deref().and_then(|n| root.find_subcommand(n));

    let mut out = argv.clone();
    for (key, value) in entries {
        if key == "config" {
            bail!("config files cannot name another config file");
        }
        let arg = sub
            .into_iter()
            .flat_map(|s| s.get_arguments())
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| anyhow!("{}: unknown key {key:?}", path.display()))?;
        if given_on_command_line(&argv, &key) {
            continue;
        }
        if arg.get_action().takes_values() {
            out.push(format!("--{key}").into());
            out.push(value.into());
        } else {
            match value.as_str() {
                "true" | "yes" | "1" => out.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                other => bail!("{}: {key} expects true or false, got {other:?}", path.display()),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_lines() {
        let got = parse_config("# c\n\ntop_n = 5\n--k=1,2\npath = \"a b\"\n").unwrap();
        assert_eq!(
            got,
            vec![
                ("top-n".to_string(), "5".to_string()),
                ("k".to_string(), "1,2".to_string()),
                ("path".to_string(), "a b".to_string())
            ]
        );
        assert!(parse_config("novalue\n").is_err());
    }

    #[test]
    fn command_line_wins() {
        let dir = std::env::temp_dir().join(format!("epimem-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("c.conf");
        fs::write(&cfg, "top-n = 5\ncosine-factor = 0.5\nallow-same-source = true\nseed = 9\n").unwrap();
        let argv = os(&["epimem", "--config", cfg.to_str().unwrap(), "pairs", "--top-n", "7"]);
        let merged = merge_config(argv).unwrap();
        let s: Vec<String> = merged.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert!(!s.contains(&"5".to_string()));
        assert!(s.windows(2).any(|w| w == ["--cosine-factor", "0.5"]));
        assert!(s.contains(&"--allow-same-source".to_string()));
        assert!(s.windows(2).any(|w| w == ["--seed", "9"]));

        fs::write(&cfg, "bogus = 1\n").unwrap();
        let argv = os(&["epimem", "--config", cfg.to_str().unwrap(), "pairs"]);
        assert!(merge_config(argv).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
