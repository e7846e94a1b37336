//! Plain-text `key = value` files shared by world configs, run configs,
//! parameter reports and manifests.
//!
//! Blank lines and lines starting with `#` are ignored. Values run to the end
//! of the line and are trimmed. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KvMap { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present, otherwise returns `default`.
    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| Error::Parse {
                line: 0,
                msg: format!("key `{key}`: cannot parse `{v}`: {e}"),
            }),
        }
    }

    pub fn require<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.entries.get(key).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing key `{key}`"),
        })?;
        v.parse().map_err(|e: T::Err| Error::Parse {
            line: 0,
            msg: format!("key `{key}`: cannot parse `{v}`: {e}"),
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Ordered writer; keeps insertion order so files read naturally.
#[derive(Debug, Clone, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        for line in text.lines() {
            self.out.push_str("# ");
            self.out.push_str(line);
            self.out.push('\n');
        }
        self
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn blank(&mut self) -> &mut Self {
        self.out.push('\n');
        self
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}
