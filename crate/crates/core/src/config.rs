//! `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Lists
//! are comma-separated. Every key must be consumed by the reader; leftovers
//! are reported as unknown.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { path, line: i + 1, msg: format!("expected `key = value`, got `{line}`") });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse { path, line: i + 1, msg: "empty key".into() });
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(Error::Parse { path, line: i + 1, msg: format!("duplicate key `{k}`") });
            }
        }
        Ok(KeyValues { path, entries, used: RefCell::default() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        let (line, v) = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some((*line, v.as_str()))
    }

    fn err(&self, line: usize, msg: String) -> Error {
        Error::Parse { path: self.path.clone(), line, msg }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| self.err(line, format!("`{key}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some((line, v)) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim().parse().map_err(|e| self.err(line, format!("`{key}`: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Errors on the first key nobody asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, (line, _))) => Err(self.err(*line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Accumulates `key = value` lines.
#[derive(Default)]
pub struct KvWriter(String);

impl KvWriter {
    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.0, "# {text}");
        self
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        let _ = writeln!(self.0, "{key} = {value}");
        self
    }

    pub fn put_list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.put(key, joined.join(","))
    }

    pub fn finish(self) -> String {
        self.0
    }
}
