//! Merges command-line flags with an optional TOML config file. Flags win.
//! Every resolved value is recorded so the manifest can echo it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Bad input from the user: exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl<E: Display> From<E> for UsageError {
    fn from(e: E) -> Self {
        UsageError(e.to_string())
    }
}

pub struct Settings {
    file: toml::Table,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(config: Option<&Path>) -> Result<Self, UsageError> {
        let file = match config {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
            }
        };
        if let Some((k, _)) = file.iter().find(|(_, v)| v.is_table() || v.is_array()) {
            return Err(UsageError(format!("config key {k:?} must be a plain value")));
        }
        Ok(Self { file, resolved: BTreeMap::new() })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, UsageError>
    where
        T::Err: Display,
    {
        let alt = key.replace('-', "_");
        let Some(v) = self.file.get(key).or_else(|| self.file.get(&alt)) else {
            return Ok(None);
        };
        let text = match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        text.parse::<T>()
            .map(Some)
            .map_err(|e| UsageError(format!("config key {key}: {e}")))
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, UsageError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, UsageError>
    where
        T::Err: Display,
    {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, UsageError>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| UsageError(format!("missing required flag --{key}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<Vec<T>, UsageError>
    where
        T::Err: Display,
    {
        let text = self.get(key, flag, default.to_string())?;
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<T>().map_err(|e| UsageError(format!("--{key} entry {s:?}: {e}"))))
            .collect()
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_file(text: &str) -> Settings {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        Settings::new(Some(&p)).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let mut s = with_file("seed = 3\ncorridor = 7\nfeature_map = \"elu\"\n");
        assert_eq!(s.get::<u64>("seed", Some(9), 0).unwrap(), 9);
        assert_eq!(s.get::<usize>("corridor", None, 10).unwrap(), 7);
        assert_eq!(s.get::<String>("feature-map", None, "x".into()).unwrap(), "elu");
        assert_eq!(s.get::<usize>("steps", None, 5).unwrap(), 5);
        assert_eq!(s.resolved()["seed"], "9");
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut s = with_file("seed = \"abc\"\n");
        assert!(s.get::<u64>("seed", None, 0).is_err());
        assert!(s.required::<u64>("r", None).is_err());
        assert!(s.list::<u64>("rs", Some("1,x".into()), "").is_err());
    }
}
