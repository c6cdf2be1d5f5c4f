//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present; `Ok(None)` when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list of values.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<T>()
                        .map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{s}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects keys outside `allowed`, so typos surface instead of being ignored.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Parse(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

pub(crate) fn join<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let kv = KeyValues::parse("# comment\nq = 3\n\nc0=2.5\nlist = 1, 2,3\n").unwrap();
        assert_eq!(kv.get::<usize>("q").unwrap(), Some(3));
        assert_eq!(kv.get::<f64>("c0").unwrap(), Some(2.5));
        assert_eq!(kv.get_list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.get::<f64>("absent").unwrap(), None);
        let again = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(kv, again);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("no equals sign").is_err());
        let kv = KeyValues::parse("q=x").unwrap();
        assert!(kv.get::<usize>("q").is_err());
        assert!(kv.check_keys(&["r"]).is_err());
    }
}
