//! Key-value config files. Lines look like `learning-rate = 0.002`;
//! `#` starts a comment. Values from the file fill in flags the user
//! did not pass on the command line (flags always win).

use std::collections::BTreeMap;
use std::path::Path;

use postsel_core::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    i + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// Flag value if present, else the config-file value, else the default.
    pub fn resolve<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw.parse().map_err(|e| {
                Error::Config(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
            None => Ok(default),
        }
    }

    /// Boolean switches: a flag presence wins; otherwise the config file
    /// may say `key = true`.
    pub fn resolve_switch(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("config key '{key}': {e}"))),
            None => Ok(false),
        }
    }
}
