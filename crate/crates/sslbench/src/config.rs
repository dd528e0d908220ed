//! Flat `key=value` experiment configuration with typed accessors and a
//! content hash that is stable under key reordering.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// An ordered map of string settings. Keys use dotted namespaces such as
/// `train.batch` or `ssl.tau`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key=value` lines. Blank lines and `#` comments are skipped;
    /// later occurrences of a key override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Invalid(format!(
                    "config line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Invalid(format!("config line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parse command-line overrides of the form `key=value`.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[S]) -> Result<Self> {
        let joined: String = pairs
            .iter()
            .map(|p| p.as_ref())
            .collect::<Vec<_>>()
            .join("\n");
        Self::parse(&joined)
    }

    /// Overlay another configuration; its values win.
    pub fn merge(&mut self, other: &Config) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("missing config key {key:?}")))
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse().map_err(|_| {
            Error::Invalid(format!("config key {key:?}: {raw:?} is not a valid {kind}"))
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.typed(key, "integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.typed(key, "integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.typed(key, "number")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        self.typed(key, "boolean")
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        if self.contains(key) {
            self.get_usize(key)
        } else {
            Ok(default)
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        if self.contains(key) {
            self.get_u64(key)
        } else {
            Ok(default)
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.contains(key) {
            self.get_f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        if self.contains(key) {
            self.get_bool(key)
        } else {
            Ok(default)
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.opt_str(key).unwrap_or(default)
    }

    /// Canonical text form: sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical form: identical settings hash
    /// identically regardless of input order.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
