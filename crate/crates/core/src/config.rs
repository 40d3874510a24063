//! Flat `key = value` text files used for tracker configs and scene specs.
//!
//! Blank lines and `#` comments are ignored. Keys are case-sensitive and
//! must be unique within a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    origin: PathBuf,
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(origin, format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::parse(
                    origin,
                    format!("line {}: duplicate key `{key}`", lineno + 1),
                ));
            }
        }
        Ok(Self {
            origin: origin.to_path_buf(),
            entries,
        })
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::parse(&self.origin, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::parse(&self.origin, format!("`{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<T>()
                            .map_err(|e| Error::parse(&self.origin, format!("`{key}`: cannot parse `{s}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

/// Writes entries as `key = value` lines in the given order.
pub fn render(entries: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_errors() {
        let cfg = FlatConfig::parse(
            "# header\nbins = 4\n\nroi = 1, 2,3 ,4 # trailing\nname=x\n",
            Path::new("c"),
        )
        .unwrap();
        assert_eq!(cfg.get::<usize>("bins").unwrap(), Some(4));
        assert_eq!(cfg.get_list::<f64>("roi").unwrap(), Some(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(cfg.get::<usize>("missing").unwrap(), None);
        assert!(cfg.get::<usize>("name").is_err());
        assert!(cfg.reject_unknown(&["bins", "roi"]).is_err());
        assert!(cfg.reject_unknown(&["bins", "roi", "name"]).is_ok());

        assert!(FlatConfig::parse("a = 1\na = 2\n", Path::new("c")).is_err());
        assert!(FlatConfig::parse("just words\n", Path::new("c")).is_err());
    }
}
