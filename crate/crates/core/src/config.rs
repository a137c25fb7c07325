//! Plain-text `key = value` configuration files.
//!
//! Lines starting with `#` and blank lines are ignored. List values are
//! separated by commas or whitespace. Every key must be consumed by the
//! reader; leftovers are reported as configuration errors so typos do not
//! pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if let Some((_, first)) = entries.insert(key.clone(), (v.trim().to_string(), i + 1)) {
                return Err(Error::Config(format!("line {}: key '{key}' already set on line {first}", i + 1)));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Insert or replace a value, e.g. from a command-line override.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let (v, _) = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let line = self.entries[key].1;
        v.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("line {line}: cannot parse value '{v}' for '{key}'")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let line = self.entries[key].1;
        v.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("line {line}: cannot parse item '{s}' for '{key}'")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Overwrite `field` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, field: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *field = v;
        }
        Ok(())
    }

    pub fn apply_list<T: FromStr>(&self, key: &str, field: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.get_list(key)? {
            *field = v;
        }
        Ok(())
    }

    /// Fail on keys nobody read.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !used.contains(*k))
            .map(|(k, (_, line))| format!("'{k}' (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown configuration keys: {}", unknown.join(", "))))
        }
    }
}

/// Accumulates `key = value` lines for writing a resolved configuration.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn put(&mut self, key: &str, value: impl Display) {
        self.out.push_str(&format!("{key} = {value}\n"));
    }

    pub fn put_f64(&mut self, key: &str, value: f64) {
        self.put(key, format_args!("{value:?}"));
    }

    pub fn put_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.put(key, s.join(", "));
    }

    pub fn finish(self) -> String {
        self.out
    }
}
