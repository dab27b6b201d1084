//! `key = value` configuration files.
//!
//! One setting per line, keys spelled like the long flags without the
//! leading dashes. Blank lines and lines starting with `#` are ignored.
//! Values are taken verbatim after trimming; surrounding double quotes are
//! removed.

use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let key = k.trim();
            if !allowed.contains(&key) {
                return Err(format!("line {}: unknown key {key:?}", n + 1));
            }
            let v = v.trim();
            let v = v
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .unwrap_or(v);
            if values.insert(key.to_string(), v.to_string()).is_some() {
                return Err(format!("line {}: duplicate key {key:?}", n + 1));
            }
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| format!("{key}: {e}")))
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool, String> {
        match self.get(key) {
            None => Ok(false),
            Some("true" | "yes" | "1" | "") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(other) => Err(format!("{key}: expected true or false, got {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[&str] = &["input", "sigma", "toy"];

    #[test]
    fn parses_comments_quotes_and_flags() {
        let c = ConfigFile::parse("# run\ninput = \"a b.png\"\n\nsigma=2.5\ntoy = yes\n", KEYS)
            .unwrap();
        assert_eq!(c.get("input"), Some("a b.png"));
        assert_eq!(c.parsed::<f64>("sigma").unwrap(), Some(2.5));
        assert!(c.flag("toy").unwrap());
        assert_eq!(c.parsed::<f64>("absent").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_lines() {
        assert!(ConfigFile::parse("colour = red", KEYS)
            .unwrap_err()
            .contains("unknown key"));
        assert!(ConfigFile::parse("sigma = 1\nsigma = 2", KEYS)
            .unwrap_err()
            .contains("duplicate"));
        assert!(ConfigFile::parse("sigma 1", KEYS)
            .unwrap_err()
            .contains("line 1"));
        let c = ConfigFile::parse("sigma = wide", KEYS).unwrap();
        assert!(c.parsed::<f64>("sigma").is_err());
    }
}
