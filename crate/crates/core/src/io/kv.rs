use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// Flat `key = value` configuration. Lines starting with `#` and blank lines
/// are ignored. Every key must be consumed by a getter before [`finish`],
/// otherwise it is reported as unknown.
///
/// [`finish`]: KvConfig::finish
#[derive(Debug)]
pub struct KvConfig {
    origin: String,
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KvConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value, got {:?}", origin, i + 1, raw)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Config(format!("{}:{}: empty key", origin, i + 1)));
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("{}:{}: duplicate key {}", origin, i + 1, k)));
            }
        }
        Ok(Self { origin: origin.to_string(), entries, used: RefCell::new(BTreeSet::new()) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.entries.get(key) else { return Ok(None) };
        self.used.borrow_mut().insert(key.to_string());
        raw.parse::<T>()
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: bad value {:?} for {}: {}", self.origin, raw, key, e)))
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing required key {}", self.origin, key)))
    }

    /// Comma-separated list of values.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.get::<String>(key)? else { return Ok(None) };
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|e| Error::Config(format!("{}: bad list entry {:?} in {}: {}", self.origin, s, key, e)))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self.entries.keys().filter(|k| !used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{}: unknown keys: {}", self.origin, unknown.join(", "))))
        }
    }

    /// Canonical `key = value` text of all entries.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }
}
