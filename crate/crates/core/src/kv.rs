//! Flat `key = value` configuration text.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Later assignments override earlier ones, which is how command-line
//! overrides are layered on top of a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = KvMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            map.apply_assignment(line)
                .map_err(|msg| Error::parse(origin, i + 1, msg))?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` assignment.
    pub fn apply_assignment(&mut self, line: &str) -> std::result::Result<(), String> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("expected `key = value`, got {line:?}"))?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(format!("invalid key {k:?}"));
        }
        self.entries.insert(k.to_owned(), v.trim().to_owned());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_owned(), value.to_string());
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value"))),
        }
    }

    pub fn parsed_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn required<V: FromStr>(&self, key: &str) -> Result<V> {
        self.parsed(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: {s:?} is not a valid list element")))
            })
            .collect::<Result<Vec<V>>>()
            .map(Some)
    }

    /// Entries whose key starts with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvMap {
        let lead = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_owned(), v.clone())))
                .collect(),
        }
    }

    /// Only the listed keys that are present.
    pub fn subset(&self, keys: &[&str]) -> KvMap {
        KvMap {
            entries: keys
                .iter()
                .filter_map(|k| self.entries.get(*k).map(|v| (k.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
