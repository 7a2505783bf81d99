//! Flat `key = value` config files. Flags given on the command line take
//! precedence over file values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    source: String,
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<ConfigFile> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        ConfigFile::parse(&text, &path.display().to_string())
    }

    /// Blank lines and lines starting with `#` are skipped. Keys may use
    /// dashes or underscores.
    pub fn parse(text: &str, source: &str) -> Result<ConfigFile> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{source}:{}: expected `key = value`", i + 1))?;
            let key = key.trim().replace('-', "_");
            if key.is_empty() {
                bail!("{source}:{}: empty key", i + 1);
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                bail!("{source}:{}: `{key}` set twice", i + 1);
            }
        }
        Ok(ConfigFile {
            source: source.to_string(),
            values,
        })
    }

    /// Removes and parses `key`; the flag value wins when present.
    pub fn pick<T: FromStr>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let from_file = self.values.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|raw| {
                raw.parse()
                    .map_err(|e| anyhow!("{}: invalid value `{raw}` for `{key}`: {e}", self.source))
            })
            .transpose()
    }

    pub fn pick_or<T: FromStr>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Errors on any key that no option consumed.
    pub fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            Some(key) => bail!("{}: unknown key `{key}`", self.source),
            None => Ok(()),
        }
    }
}
