//! Plain-text `key = value` configuration, canonical hashing, and the
//! provenance triple every artifact embeds.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::unet::hex_string;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Ordered key=value map. `#` starts a comment, blank lines are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvConfig { map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("bad value for {key}: {e}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parsed(key, default)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parsed(key, default)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parsed(key, default)
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Sorted `key = value` lines; the canonical form that gets hashed.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// What every artifact records about its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            seed,
            config_hash: config_hash.into(),
        }
    }

    pub fn header_lines(&self, prefix: &str) -> String {
        format!(
            "{prefix}tool_version = {}\n{prefix}seed = {}\n{prefix}config_hash = {}\n",
            self.tool_version, self.seed, self.config_hash
        )
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        Ok(Provenance {
            tool_version: kv
                .get("tool_version")
                .ok_or_else(|| Error::Config("missing tool_version".into()))?
                .to_string(),
            seed: kv.get_u64("seed", 0)?,
            config_hash: kv
                .get("config_hash")
                .ok_or_else(|| Error::Config("missing config_hash".into()))?
                .to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_canonicalize() {
        let text = "# comment\n b = 2 \na=1\n\nzeta = hello world\n";
        let kv = KvConfig::parse(text).unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("2"));
        assert_eq!(kv.get("zeta"), Some("hello world"));
        assert_eq!(kv.canonical_text(), "a = 1\nb = 2\nzeta = hello world\n");
    }

    #[test]
    fn hash_is_order_independent_and_value_sensitive() {
        let a = KvConfig::parse("x = 1\ny = 2\n").unwrap();
        let b = KvConfig::parse("y = 2\nx = 1\n").unwrap();
        let c = KvConfig::parse("x = 1\ny = 3\n").unwrap();
        assert_eq!(a.hash_hex(), b.hash_hex());
        assert_ne!(a.hash_hex(), c.hash_hex());
    }

    #[test]
    fn typed_getters_and_defaults() {
        let kv = KvConfig::parse("n = 12\nf = 0.5\n").unwrap();
        assert_eq!(kv.get_u64("n", 0).unwrap(), 12);
        assert_eq!(kv.get_f64("f", 0.0).unwrap(), 0.5);
        assert_eq!(kv.get_u64("missing", 7).unwrap(), 7);
        assert!(kv.get_u64("f", 0).is_err());
    }

    #[test]
    fn bad_lines_rejected() {
        assert!(KvConfig::parse("just words\n").is_err());
        assert!(KvConfig::parse("= 3\n").is_err());
    }
}
