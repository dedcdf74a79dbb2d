//! Line-based `key = value` text files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("cannot parse {key} = {v}")))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::config(format!("missing key {key}")))
    }

    /// Whitespace-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::config(format!("missing key {key}")))?;
        v.split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::config(format!("cannot parse {key} = {v}")))
            })
            .collect()
    }

    /// Three-element list value, or `default` when the key is absent.
    pub fn array3<T: FromStr + Copy>(&self, key: &str, default: [T; 3]) -> Result<[T; 3]> {
        if self.raw(key).is_none() {
            return Ok(default);
        }
        let v: Vec<T> = self.list(key)?;
        v.try_into()
            .map_err(|_| Error::config(format!("{key} needs three values")))
    }

    /// Serializes in key order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
