//! Flag defaults from a JSON config file.
//!
//! Top-level keys apply to every subcommand that has a flag of that name.
//! An object under a subcommand's name applies to that subcommand only and
//! must not name unknown flags. Config values are inserted ahead of the
//! command-line flags, and later occurrences override earlier ones.

use std::ffi::OsString;
use std::path::Path;

use clap::CommandFactory;
use serde_json::{Map, Value};

use crate::args::Cli;
use crate::CliError;

/// Path given with `--config`, if any.
pub fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// `argv` with config-file flags spliced in after the subcommand name.
pub fn merge(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(sub_pos) = argv
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
    else {
        return Ok(argv);
    };
    let sub = argv[sub_pos].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let Some(sub_cmd) = cmd.find_subcommand(&sub) else {
        return Ok(argv);
    };
    let known: Vec<String> = sub_cmd
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    let all_known = |flag: &str| {
        cmd.get_subcommands()
            .any(|s| s.get_arguments().any(|a| a.get_long() == Some(flag)))
    };

    let root = load(Path::new(&path))?;
    let mut injected = Vec::new();
    for (key, value) in &root {
        if cmd.find_subcommand(key).is_some() {
            continue;
        }
        let flag = key.replace('_', "-");
        if known.contains(&flag) {
            push_flag(&mut injected, &flag, value)?;
        } else if !all_known(&flag) {
            return Err(CliError::Usage(format!("unknown config key '{key}'")));
        }
    }
    if let Some(section) = root.get(&sub) {
        let Value::Object(section) = section else {
            return Err(CliError::Usage(format!(
                "config section '{sub}' must be an object"
            )));
        };
        for (key, value) in section {
            let flag = key.replace('_', "-");
            if !known.contains(&flag) {
                return Err(CliError::Usage(format!("unknown config key '{sub}.{key}'")));
            }
            push_flag(&mut injected, &flag, value)?;
        }
    }

    let mut out = argv[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend(argv[sub_pos + 1..].iter().cloned());
    Ok(out)
}

fn load(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(
            "config file must hold a JSON object".into(),
        )),
        Err(e) => Err(CliError::Usage(format!("invalid config JSON: {e}"))),
    }
}

fn push_flag(out: &mut Vec<OsString>, flag: &str, value: &Value) -> Result<(), CliError> {
    let text = match value {
        Value::Bool(true) => {
            out.push(format!("--{flag}").into());
            return Ok(());
        }
        Value::Bool(false) | Value::Null => return Ok(()),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        _ => {
            return Err(CliError::Usage(format!(
                "config value for '{flag}' must be a scalar"
            )))
        }
    };
    out.push(format!("--{flag}").into());
    out.push(text.into());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn finds_config_flag_in_both_spellings() {
        assert_eq!(
            config_path(&os(&["rfx", "train", "--config", "a.json"])),
            Some("a.json".into())
        );
        assert_eq!(
            config_path(&os(&["rfx", "train", "--config=b.json"])),
            Some("b.json".into())
        );
        assert_eq!(config_path(&os(&["rfx", "train"])), None);
    }

    #[test]
    fn config_values_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"trees": 50, "seed": 3, "casewise": true, "forest": "f.rfx", "train": {"mtry": 2}}"#)
            .unwrap();
        let p = path.to_str().unwrap();
        let merged = merge(os(&["rfx", "train", "--config", p, "--trees", "10"])).unwrap();
        let merged: Vec<String> = merged
            .iter()
            .map(|s| s.to_string_lossy().into_owned())
            .collect();
        let trees_cfg = merged.iter().position(|s| s == "50").unwrap();
        let trees_cli = merged.iter().position(|s| s == "10").unwrap();
        assert!(trees_cfg < trees_cli);
        assert!(merged.contains(&"--casewise".to_string()));
        assert!(merged.contains(&"--mtry".to_string()));
        assert!(!merged.contains(&"--forest".to_string()));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"tres": 5}"#).unwrap();
        let err = merge(os(&["rfx", "train", "--config", path.to_str().unwrap()])).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }
}
