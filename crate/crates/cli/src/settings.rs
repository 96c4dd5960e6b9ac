//! Flat `key = value` settings merged from a config file and command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// A problem with the user's configuration. Reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Keys every command accepts.
const COMMON_KEYS: [&str; 2] = ["seed", "threads"];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!("{origin}:{}: expected `key = value`", n + 1));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return config_err(format!("{origin}:{}: empty key", n + 1));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return config_err(format!("{origin}:{}: duplicate key `{k}`", n + 1));
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Settings::parse(&text, &path.display().to_string())
    }

    /// Flag values win over file values.
    pub fn set(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v);
        }
    }

    /// Rejects keys outside `allowed` (plus the common ones).
    pub fn restrict(&self, command: &str, allowed: &[&str]) -> Result<(), ConfigError> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(String::as_str)
            .filter(|k| !allowed.contains(k) && !COMMON_KEYS.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            config_err(format!("unknown key(s) for `{command}`: {}", unknown.join(", ")))
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| ConfigError(format!("bad value `{v}` for `{key}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError(format!("missing required key `{key}`")))
    }

    /// An input file that must already exist.
    pub fn input_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        let p: PathBuf = self.require(key)?;
        if !p.is_file() {
            return config_err(format!("`{key}` path {} does not exist", p.display()));
        }
        Ok(p)
    }

    /// Comma-separated list, e.g. `lr_grid = 0.003, 0.01`.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(raw) = self.values.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|e| ConfigError(format!("bad entry `{s}` in `{key}`: {e}"))))
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// `RxC` dimensions, e.g. `grid = 12x12`.
    pub fn dims(&self, key: &str) -> Result<Option<(usize, usize)>, ConfigError> {
        let Some(raw) = self.values.get(key) else {
            return Ok(None);
        };
        let parsed = raw
            .split_once('x')
            .and_then(|(r, c)| Some((r.trim().parse().ok()?, c.trim().parse().ok()?)));
        match parsed {
            Some((r, c)) if r > 0 && c > 0 => Ok(Some((r, c))),
            _ => config_err(format!("`{key}` must look like 12x12, got `{raw}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut s = Settings::parse("# header\nlr = 0.01  # inline\n\nepochs=5\n", "cfg").unwrap();
        assert_eq!(s.get::<f64>("lr").unwrap(), Some(0.01));
        s.set("lr", Some("0.1".into()));
        s.set("epochs", None);
        assert_eq!(s.get::<f64>("lr").unwrap(), Some(0.1));
        assert_eq!(s.require::<usize>("epochs").unwrap(), 5);
        assert!(s.require::<usize>("patience").is_err());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(Settings::parse("just words", "cfg").is_err());
        assert!(Settings::parse("a = 1\na = 2", "cfg").is_err());
        let s = Settings::parse("lr = fast\nbogus = 1\ngrid = 3by4", "cfg").unwrap();
        assert!(s.get::<f64>("lr").is_err());
        assert!(s.restrict("train", &["lr", "grid"]).is_err());
        assert!(s.dims("grid").is_err());
    }

    #[test]
    fn lists_and_dims() {
        let s = Settings::parse("lr_grid = 0.003, 0.01 ,0.03\ngrid = 12x10", "cfg").unwrap();
        assert_eq!(s.list::<f64>("lr_grid").unwrap(), Some(vec![0.003, 0.01, 0.03]));
        assert_eq!(s.dims("grid").unwrap(), Some((12, 10)));
        assert_eq!(s.dims("missing").unwrap(), None);
    }
}
