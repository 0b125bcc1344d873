//! Flat `key = value` configuration files.
//!
//! Lines starting with `#` are comments, blank lines are ignored, keys may
//! contain spaces (`Upper Percentile = 0.7`). Keys are case-sensitive; a key
//! may appear only once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses and removes `key`, returning `default` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T, expected: &'static str) -> Result<T, ConfigError> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v,
                expected,
            }),
        }
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.take(key, default, "number")?;
        if !v.is_finite() {
            return Err(ConfigError::Invalid {
                key: key.to_string(),
                reason: "must be finite".into(),
            });
        }
        Ok(v)
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.take(key, default, "non-negative integer")
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.take(key, default, "non-negative integer")
    }

    /// Accepts `true/false`, `True/False`, `1/0`.
    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "True" | "1" => Ok(true),
                "false" | "False" | "0" => Ok(false),
                _ => Err(ConfigError::Value {
                    key: key.to_string(),
                    value: v,
                    expected: "boolean",
                }),
            },
        }
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        self.entries.remove(key).unwrap_or_else(|| default.to_string())
    }

    /// `lo, hi` pair.
    pub fn take_range(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64), ConfigError> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                let parsed: Option<Vec<f64>> = parts.iter().map(|p| p.parse().ok()).collect();
                match parsed.as_deref() {
                    Some(&[lo, hi]) if lo.is_finite() && hi.is_finite() => Ok((lo, hi)),
                    _ => Err(ConfigError::Value {
                        key: key.to_string(),
                        value: v,
                        expected: "`lo, hi` pair",
                    }),
                }
            }
        }
    }

    /// Fails on any key not consumed by a `take_*` call.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some(k) => Err(ConfigError::Unknown(k)),
            None => Ok(()),
        }
    }

    /// Applies `overrides` on top of `self` (override wins).
    pub fn merged(mut self, overrides: &KvConfig) -> Self {
        for (k, v) in &overrides.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub(crate) fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}
