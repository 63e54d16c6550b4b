//! Flat `key = value` configuration files.
//!
//! Keys are case-insensitive and `-`/`_` are interchangeable, so a file key
//! `batch_size` and a command-line flag `--batch-size` name the same setting.
//! Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid("config", format!("line {}: expected 'key = value'", i + 1))
            })?;
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(normalize_key(key), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize_key(key)).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(text) => text
                .parse()
                .map_err(|e| Error::invalid(normalize_key(key), format!("'{text}': {e}"))),
        }
    }

    /// Comma-separated list of values.
    pub fn parsed_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(text) => text
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|e| Error::invalid(normalize_key(key), format!("'{text}': {e}")))
                })
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sorted `key = value` lines; stable input for hashing.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_normalize_and_hash() {
        let a = KvConfig::parse("# comment\nbatch-size = 16\n\nLR=0.1\n").unwrap();
        assert_eq!(a.get("batch_size"), Some("16"));
        assert_eq!(a.parsed("lr", 0.0).unwrap(), 0.1);
        assert_eq!(a.parsed("epochs", 7usize).unwrap(), 7);
        let b = KvConfig::parse("lr = 0.1\nbatch_size = 16").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert!(a.parsed::<usize>("lr", 1).is_err());
        assert!(KvConfig::parse("novalue").is_err());
        let l = KvConfig::parse("widths = 8, 16").unwrap();
        assert_eq!(l.parsed_list("widths", vec![1usize]).unwrap(), vec![8, 16]);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
