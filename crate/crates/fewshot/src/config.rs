//! Plain-text key-value experiment configs.
//!
//! One `key = value` pair per line, dotted keys (`stylemix.alpha = 0.3`),
//! `#` comments. Keys are kept sorted so the canonical text — and the config
//! hash derived from it — is independent of declaration order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::rng::fnv64;

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config key `{key}`: {problem}")]
    BadValue { key: String, problem: String },
    #[error("missing required config key `{key}`")]
    Missing { key: String },
    #[error("unknown config key `{key}` (known prefixes: {known})")]
    Unknown { key: String, known: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Apply `key=value` override strings (CLI `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (i, o) in overrides.iter().enumerate() {
            let Some((key, value)) = o.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: o.clone(),
                });
            };
            self.set(key.trim(), value.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| ConfigError::Missing {
            key: key.to_string(),
        })
    }

    fn parse_with<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            problem: format!(
                "`{value}` is not a valid {}",
                std::any::type_name::<T>()
            ),
        })
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => self.parse_with(key, v),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => self.parse_with(key, v),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("on") | Some("1") => Ok(true),
            Some("false") | Some("off") | Some("0") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                problem: format!("`{v}` is not a boolean (true/false/on/off/1/0)"),
            }),
        }
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        self.parse_with(key, v)
    }

    /// Comma-separated list of indices ("0,2,3").
    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|part| self.parse_with(key, part.trim()))
                .collect(),
        }
    }

    /// Reject keys outside the allowed prefixes (exact keys also allowed).
    pub fn validate_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            let ok = allowed
                .iter()
                .any(|a| key == a || key.starts_with(&format!("{a}.")));
            if !ok {
                return Err(ConfigError::Unknown {
                    key: key.clone(),
                    known: allowed.join(", "),
                });
            }
        }
        Ok(())
    }

    /// Sorted `key = value` lines; the byte content the hash covers.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv64(self.canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = KvConfig::parse(
            "# experiment\nstylemix.alpha = 0.3\n\n  train.episodes=200 # inline\n",
        )
        .unwrap();
        assert_eq!(c.get("stylemix.alpha"), Some("0.3"));
        assert_eq!(c.get_usize("train.episodes", 0).unwrap(), 200);
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let err = KvConfig::parse("a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 2, .. }));
    }

    #[test]
    fn hash_ignores_declaration_order() {
        let a = KvConfig::parse("x = 1\ny = 2\n").unwrap();
        let b = KvConfig::parse("y = 2\nx = 1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = KvConfig::parse("x = 1\ny = 3\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_key_names_itself() {
        let c = KvConfig::parse("tran.episodes = 5\n").unwrap();
        let err = c.validate_keys(&["train", "seeds"]).unwrap_err();
        assert!(err.to_string().contains("tran.episodes"));
    }

    #[test]
    fn typed_getters_validate() {
        let c = KvConfig::parse("a = 0.5\nb = yes\n").unwrap();
        assert_eq!(c.get_f64("a", 0.0).unwrap(), 0.5);
        assert!(c.get_bool("b", false).is_err());
        assert!(c.get_f64("missing", 1.25).unwrap() == 1.25);
        assert!(matches!(
            c.require("seeds.train").unwrap_err(),
            ConfigError::Missing { .. }
        ));
    }

    #[test]
    fn list_getter_splits_on_commas() {
        let c = KvConfig::parse("slots = 0, 2,3\n").unwrap();
        assert_eq!(c.get_usize_list("slots", &[]).unwrap(), vec![0, 2, 3]);
    }
}
