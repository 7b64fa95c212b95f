//! Flat `key = value` text used for configs and the checkpoint's embedded
//! model description.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries; every key must be consumed before [`Fields::finish`].
#[derive(Clone, Debug, Default)]
pub struct Fields {
    entries: BTreeMap<String, String>,
}

impl Fields {
    /// Parse lines of `key = value`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Invalid(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Invalid(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Remove and parse `key`, or return `default` when absent.
    pub fn take<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Invalid(format!("{key} = {v}: {e}"))),
        }
    }

    /// Remove and parse a `a,b` pair.
    pub fn take_pair(&mut self, key: &str, default: [usize; 2]) -> Result<[usize; 2]> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => parse_pair(&v).ok_or_else(|| Error::Invalid(format!("{key} = {v}: expected two integers a,b"))),
        }
    }

    /// Error if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::Invalid(format!(
                "unknown keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

fn parse_pair(v: &str) -> Option<[usize; 2]> {
    let (a, b) = v.split_once(',')?;
    Some([a.trim().parse().ok()?, b.trim().parse().ok()?])
}

/// Ordered `key = value` output.
#[derive(Clone, Debug, Default)]
pub struct Writer {
    text: String,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.text.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn put_pair(&mut self, key: &str, v: [usize; 2]) -> &mut Self {
        self.put(key, format!("{},{}", v[0], v[1]))
    }

    pub fn finish(self) -> String {
        self.text
    }
}
