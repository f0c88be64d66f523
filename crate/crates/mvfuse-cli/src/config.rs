//! Flat key=value config files and flag/file/default resolution.
//!
//! Keys mirror the long flag names (`tau=0.02`, `sub-batch=8`,
//! `mask-f2g=true`). Precedence everywhere: built-in defaults, then the
//! config file, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use mvfuse_core::{Error, Result};

#[derive(Debug, Default)]
pub struct KvConfig(BTreeMap<String, String>);

impl KvConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("config key '{key}': {e}"))),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

/// flag > file > default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Four comma-separated proportions, e.g. `0.25,0.25,0.25,0.25`.
pub fn parse_mix(raw: &str) -> Result<[f64; 4]> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!(
            "mix needs exactly 4 comma-separated values, got {}",
            parts.len()
        )));
    }
    let mut mix = [0.0; 4];
    for (slot, part) in mix.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("bad mix component '{part}': {e}")))?;
    }
    Ok(mix)
}
