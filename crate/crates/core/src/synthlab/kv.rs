//! `key = value` text files. `#` starts a comment; keys may repeat.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyValues {
    pub path: PathBuf,
    pub entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: v.trim().to_string(),
                line: i + 1,
            });
        }
        Ok(KeyValues {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    /// Reject keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(self.error(e.line, format!("unknown key `{}`", e.key))),
            None => Ok(()),
        }
    }

    /// Last entry for `key`.
    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entry(key).map(|e| self.value(e)).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Format {
            path: self.path.clone(),
            message: format!("missing key `{key}`"),
        })
    }

    pub fn value<T: FromStr>(&self, e: &Entry) -> Result<T> {
        e.value
            .parse()
            .map_err(|_| self.error(e.line, format!("bad value `{}` for `{}`", e.value, e.key)))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(e) = self.entry(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| self.error(e.line, format!("bad list item `{}` for `{}`", s.trim(), e.key)))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Two comma-separated numbers `lo, hi` with `lo <= hi`.
    pub fn range(&self, key: &str) -> Result<Option<(f64, f64)>> {
        let Some(v) = self.list::<f64>(key)? else {
            return Ok(None);
        };
        let line = self.entry(key).map_or(0, |e| e.line);
        match v[..] {
            [x] => Ok(Some((x, x))),
            [lo, hi] if lo <= hi => Ok(Some((lo, hi))),
            _ => Err(self.error(line, format!("`{key}` needs `lo, hi` with lo <= hi"))),
        }
    }
}

/// Joins list items for writing.
pub fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
