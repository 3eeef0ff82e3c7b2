//! Flat `key = value` text used for configs, checkpoint headers and
//! dataset metadata. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Format(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Format(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Format(format!("missing key `{key}`")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Canonical form: one `key=value` line per entry in key order.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Format(format!("invalid {what} entry `{s}`")))
        })
        .collect()
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
