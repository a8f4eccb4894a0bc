//! Flat `key=value` configuration files.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Keys are the dotted names listed in [`mgt_core::config::KEYS`];
//! anything else is rejected.

use std::path::Path;

use mgt_core::{ExperimentConfig, MgtError, Result};

/// Splits `key=value`, trimming both sides.
pub fn split_assignment(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then(|| (k, v.trim()))
}

/// Applies file text, then overrides, on top of the defaults and validates.
pub fn parse_config_text(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = split_assignment(line).ok_or_else(|| {
            MgtError::InvalidConfig(format!("line {}: expected key=value, got {line:?}", n + 1))
        })?;
        config.set(key, value)?;
    }
    for o in overrides {
        let (key, value) = split_assignment(o)
            .ok_or_else(|| MgtError::InvalidConfig(format!("override {o:?} is not key=value")))?;
        config.set(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MgtError::Io(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            parse_config_text("", &[]).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn bad_value_names_key() {
        let err = parse_config_text("model.depth=abc\n", &[]).unwrap_err();
        assert!(err.to_string().contains("model.depth"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config_text("model.widht=3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("model.widht"), "{err}");
    }

    #[test]
    fn override_wins() {
        let c =
            parse_config_text("# comment\nmodel.width=32\n", &["model.width=64".into()]).unwrap();
        assert_eq!(c.model.width, 64);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_config_text("\nmodel.width\n", &[]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
