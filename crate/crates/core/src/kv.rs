//! Flat `key = value` text configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{KwsError, Result};

/// Ordered key/value pairs; later entries override earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KwsError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?)
    }

    /// Parses `key=value` override strings as given on a command line.
    pub fn from_overrides<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let mut kv = Self::default();
        for item in items {
            let (k, v) = item
                .as_ref()
                .split_once('=')
                .ok_or_else(|| KwsError::Config(format!("override `{}` is not key=value", item.as_ref())))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.pairs.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.pairs {
            self.set(k, v);
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn read<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key) {
            *slot = v.parse().map_err(|e| KwsError::Config(format!("{key} = {v}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Rejects keys not in `known`.
pub fn check_keys(kv: &KeyValues, known: &[&str]) -> Result<()> {
    match kv.keys().find(|k| !known.contains(k)) {
        Some(k) => Err(KwsError::Config(format!("unknown key `{k}`"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_and_read() {
        let mut kv = KeyValues::parse("# comment\na = 3\nb=true # trailing\n\n").unwrap();
        kv.merge(&KeyValues::from_overrides(&["a=5"]).unwrap());
        let (mut a, mut b, mut c) = (0usize, false, 1.5f64);
        kv.read("a", &mut a).unwrap();
        kv.read("b", &mut b).unwrap();
        kv.read("c", &mut c).unwrap();
        assert_eq!((a, b, c), (5, true, 1.5));
        assert_eq!(kv.to_text(), "a = 5\nb = true\n");
        assert!(KeyValues::parse("novalue").is_err());
        assert!(kv.read("b", &mut a).is_err());
        assert!(check_keys(&kv, &["a"]).is_err());
    }
}
