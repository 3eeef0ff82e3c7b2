//! Layered settings: command-line flag, then `--config` file, then default.
//! Every resolved value is recorded for the run manifest.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rcn::kv::KvMap;

use crate::manifest::CONFIG_PREFIX;

#[derive(Debug, Default)]
pub struct Settings {
    file: KvMap,
    used: Vec<String>,
    resolved: KvMap,
}

impl Settings {
    /// Reads a flat `key = value` file. A run manifest is accepted too, in
    /// which case only its recorded configuration is used.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let kv = KvMap::parse(&text).map_err(|e| rcn::Error::Config(format!("{}: {e}", path.display())))?;
        let file = if kv.get_str("command").is_some() {
            let mut inner = KvMap::new();
            for key in kv.keys() {
                if let Some(k) = key.strip_prefix(CONFIG_PREFIX) {
                    inner.set(k, kv.get_str(key).unwrap_or_default());
                }
            }
            inner
        } else {
            kv
        };
        Ok(Self { file, ..Self::default() })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.used.push(key.to_string());
        match self.file.get_str(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| rcn::Error::Config(format!("invalid value `{v}` for config key `{key}`")).into()),
        }
    }

    pub fn pick<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let file = self.from_file(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.resolved.set(key, &v);
        Ok(v)
    }

    /// Optional setting; a file value of `none` clears the default.
    pub fn pick_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> Result<Option<T>> {
        let file = self.from_file::<String>(key)?;
        let v = match (flag, file.as_deref()) {
            (Some(v), _) => Some(v),
            (None, None) => default,
            (None, Some("none")) => None,
            (None, Some(s)) => Some(
                s.parse()
                    .map_err(|_| rcn::Error::Config(format!("invalid value `{s}` for config key `{key}`")))?,
            ),
        };
        match &v {
            Some(x) => self.resolved.set(key, x),
            None => self.resolved.set(key, "none"),
        }
        Ok(v)
    }

    /// Boolean switches: the flag turns the setting on, the file may too.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.from_file::<bool>(key)?.unwrap_or(false);
        self.resolved.set(key, v);
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.pick_opt(key, flag, None)?
            .ok_or_else(|| anyhow!(rcn::Error::Config(format!("`--{}` is required", key.replace('_', "-")))))
    }

    /// Rejects config-file keys that no setting of this command consumed.
    pub fn finish(self) -> Result<KvMap> {
        let unknown: Vec<&str> = self.file.keys().filter(|k| !self.used.iter().any(|u| u == k)).collect();
        if !unknown.is_empty() {
            bail!(rcn::Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(self.resolved)
    }
}
