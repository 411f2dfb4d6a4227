//! Flat `key = value` configuration with CLI > file > default precedence.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! train.epochs = 50
//! jr.C = 135
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Cli,
    File,
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolved {
    pub key: String,
    pub value: String,
    pub source: Source,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::invalid(format!("config line {}: empty key", no + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::invalid(format!("config line {}: duplicate key {k}", no + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.values
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v.as_str())))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Resolves settings and records where each value came from.
#[derive(Debug, Clone, Default)]
pub struct Resolver {
    file: ConfigFile,
    resolved: Vec<Resolved>,
}

impl Resolver {
    pub fn new(file: ConfigFile) -> Self {
        Self {
            file,
            resolved: Vec::new(),
        }
    }

    pub fn file(&self) -> &ConfigFile {
        &self.file
    }

    pub fn get<T>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let (value, source) = match (cli, self.file.get(key)) {
            (Some(v), _) => (v, Source::Cli),
            (None, Some(text)) => (
                text.parse()
                    .map_err(|e| Error::invalid(format!("config key {key}: {e}")))?,
                Source::File,
            ),
            (None, None) => (default, Source::Default),
        };
        self.record(key, value.to_string(), source);
        Ok(value)
    }

    /// Like [`get`](Self::get) for settings without a default.
    pub fn get_opt<T>(&mut self, key: &str, cli: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let (value, source) = match (cli, self.file.get(key)) {
            (Some(v), _) => (v, Source::Cli),
            (None, Some(text)) => (
                text.parse()
                    .map_err(|e| Error::invalid(format!("config key {key}: {e}")))?,
                Source::File,
            ),
            (None, None) => return Ok(None),
        };
        self.record(key, value.to_string(), source);
        Ok(Some(value))
    }

    pub fn record(&mut self, key: &str, value: String, source: Source) {
        self.resolved.retain(|r| r.key != key);
        self.resolved.push(Resolved {
            key: key.to_string(),
            value,
            source,
        });
    }

    pub fn resolved(&self) -> &[Resolved] {
        &self.resolved
    }
}
