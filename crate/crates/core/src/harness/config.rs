//! Flat `key = value` configuration.
//!
//! One setting per line, `#` starts a comment line, blank lines are
//! ignored. Keys are dotted (`train.batch_size`); each consumer reads the
//! namespaces it owns and rejects unknown keys inside them.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(key.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    n + 1
                )));
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        KvConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets or replaces a value; command-line overrides go through here.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Fails on any key under `prefix.` that is not in `known`.
    pub fn check_known(&self, prefix: &str, known: &[&str]) -> Result<()> {
        let ns = format!("{prefix}.");
        for key in self.entries.keys() {
            if let Some(rest) = key.strip_prefix(&ns) {
                if !known.contains(&rest) {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_types_values() {
        let c = KvConfig::parse(
            "# comment\n\ntrain.batch_size = 16\nperturb.kind=switchout\n x.y = 0.5 \n",
        )
        .unwrap();
        assert_eq!(c.get::<usize>("train.batch_size").unwrap(), Some(16));
        assert_eq!(c.raw("perturb.kind"), Some("switchout"));
        assert_eq!(c.get::<f64>("x.y").unwrap(), Some(0.5));
        assert_eq!(c.get_or("missing", 3usize).unwrap(), 3);
        assert!(c.get::<usize>("perturb.kind").is_err());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(KvConfig::parse("no equals sign").is_err());
        assert!(KvConfig::parse("= 3").is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
    }

    #[test]
    fn unknown_keys_in_a_namespace() {
        let c = KvConfig::parse("train.epochs = 3\ntrain.epohcs = 4\ndata.seed = 1").unwrap();
        assert!(c.check_known("train", &["epochs"]).is_err());
        assert!(c.check_known("data", &["seed"]).is_ok());
    }

    #[test]
    fn overrides_replace_and_round_trip() {
        let mut c = KvConfig::parse("a.b = 1").unwrap();
        c.set("a.b", 2);
        c.set("c.d", "x");
        let back = KvConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get::<u32>("a.b").unwrap(), Some(2));
    }
}
