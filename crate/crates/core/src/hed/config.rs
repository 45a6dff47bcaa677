//! Sectioned key=value configuration files, shared by the services, the
//! daemon and the CLI.
//!
//! ```text
//! # comment
//! [client]
//! bartender_urls = chel://127.0.0.1:4000/Bartender, chel://127.0.0.1:4100/Bartender
//! needed_replicas = 2
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value` or `[section]`")]
    Syntax(usize),
    #[error("missing required key {0}.{1}")]
    Missing(String, String),
    #[error("invalid value for {0}.{1}: {2}")]
    Invalid(String, String, String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax(idx + 1))?;
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { sections })
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn sections(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, String>)> {
        self.sections.iter()
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(name)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        self.get(section, key)
            .ok_or_else(|| ConfigError::Missing(section.to_string(), key.to_string()))
    }

    pub fn get_u64(&self, section: &str, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                ConfigError::Invalid(section.to_string(), key.to_string(), v.to_string())
            }),
        }
    }

    pub fn get_f64(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                ConfigError::Invalid(section.to_string(), key.to_string(), v.to_string())
            }),
        }
    }

    /// Comma-separated list value; empty or absent key yields an empty list.
    pub fn get_list(&self, section: &str, key: &str) -> Vec<String> {
        self.get(section, key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_lists() {
        let cfg = Config::parse(
            "# chelonia client\n[client]\nbartender_urls = a, b ,c\nneeded_replicas = 2\n\n[hed]\nmax_concurrent=30\n",
        )
        .unwrap();
        assert_eq!(cfg.get_list("client", "bartender_urls"), vec!["a", "b", "c"]);
        assert_eq!(cfg.get_u64("client", "needed_replicas", 1).unwrap(), 2);
        assert_eq!(cfg.get_u64("hed", "max_concurrent", 64).unwrap(), 30);
        assert_eq!(cfg.get_u64("hed", "queue_capacity", 256).unwrap(), 256);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Config::parse("[a]\nnot a key value\n").is_err());
    }
}
