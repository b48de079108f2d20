//! Plain-text `key=value` run configs, one per output file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const HASH_PREFIX: &str = "input-hash.";

/// Flags of one subcommand invocation, plus hashes of its input files.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    pub command: Option<String>,
    pub values: BTreeMap<String, String>,
    /// Input flag name to hex SHA-256 of the file it named.
    pub inputs: BTreeMap<String, String>,
    /// Keys that appeared more than once while parsing.
    pub duplicates: Vec<String>,
}

/// Config keys use dashes; underscores are accepted.
pub fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                reason: format!("expected key=value, got {line:?}"),
            })?;
            let key = normalize_key(k);
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config {
                    line: i + 1,
                    reason: format!("bad key {k:?}"),
                });
            }
            let value = v.trim().to_string();
            let replaced = if key == "command" {
                cfg.command.replace(value).is_some()
            } else if let Some(name) = key.strip_prefix(HASH_PREFIX) {
                cfg.inputs.insert(name.to_string(), value).is_some()
            } else {
                cfg.values.insert(key.clone(), value).is_some()
            };
            if replaced {
                log::warn!(
                    "config line {}: duplicate key {key:?}, last occurrence wins",
                    i + 1
                );
                cfg.duplicates.push(key);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(c) = &self.command {
            s.push_str(&format!("command={c}\n"));
        }
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.inputs {
            s.push_str(&format!("{HASH_PREFIX}{k}={v}\n"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, self.to_text().as_bytes())
    }

    /// Entries of `other` replace those of `self`.
    pub fn overlay(&mut self, other: &RunConfig) {
        if other.command.is_some() {
            self.command.clone_from(&other.command);
        }
        self.values
            .extend(other.values.iter().map(|(k, v)| (k.clone(), v.clone())));
        self.inputs
            .extend(other.inputs.iter().map(|(k, v)| (k.clone(), v.clone())));
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(normalize_key(key), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Invalid(format!("{key}={v}: {e}")))
            })
            .transpose()
    }

    /// The value of `key`, storing `default` when absent so the saved
    /// config lists every setting used.
    pub fn get_or<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key)? {
            Some(v) => Ok(v),
            None => {
                self.set(key, &default);
                Ok(default)
            }
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Invalid(format!("missing required setting --{key}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.require(key)
    }

    /// Comma-separated list, or `default` when absent.
    pub fn list_or<T: FromStr + Display>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.raw(key).map(str::to_string) else {
            let joined: Vec<String> = default.iter().map(ToString::to_string).collect();
            self.set(key, joined.join(","));
            return self.list_or(key, default);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| Error::Invalid(format!("{key}: {s}: {e}")))
            })
            .collect()
    }

    /// Records the hash of the file named by input flag `key`. A differing
    /// hash already present (from a loaded config) is reported as a warning.
    pub fn hash_input(&mut self, key: &str) -> Result<()> {
        let path = self.path(key)?;
        let h = hash_file(&path)?;
        if let Some(old) = self.inputs.get(key) {
            if *old != h {
                log::warn!(
                    "input {key} ({}) differs from the file recorded in the config",
                    path.display()
                );
            }
        }
        self.inputs.insert(key.to_string(), h);
        Ok(())
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `<output>.runconfig`
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_os_string();
    s.push(".runconfig");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.get_or("k", 32usize).unwrap(), 32);
        assert_eq!(c.raw("k"), Some("32"));
    }

    #[test]
    fn beta_literal() {
        let c = RunConfig::parse("# g-SAE\nbeta=100000\n").unwrap();
        assert_eq!(c.get::<f32>("beta").unwrap(), Some(1e5));
    }

    #[test]
    fn duplicate_key_last_wins() {
        let c = RunConfig::parse("k=8\nk=32\n").unwrap();
        assert_eq!(c.get::<usize>("k").unwrap(), Some(32));
        assert_eq!(c.duplicates, vec!["k".to_string()]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let e = RunConfig::parse("k=8\n\n# ok\nnot a pair\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 4, .. }), "{e}");
        assert!(matches!(
            RunConfig::parse("=3").unwrap_err(),
            Error::Config { line: 1, .. }
        ));
        assert!(matches!(
            RunConfig::parse("a b=3").unwrap_err(),
            Error::Config { line: 1, .. }
        ));
    }

    #[test]
    fn underscores_normalize_and_text_round_trips() {
        let mut c =
            RunConfig::parse("command=train-sae\nmax_records = 10\ninput-hash.cache=ab\n").unwrap();
        assert_eq!(c.command.as_deref(), Some("train-sae"));
        assert_eq!(c.get::<usize>("max-records").unwrap(), Some(10));
        assert_eq!(c.inputs["cache"], "ab");
        c.set("variant", "gsae");
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overlay_prefers_later_values() {
        let mut file = RunConfig::parse("k=8\nseed=1\n").unwrap();
        let cli = RunConfig::parse("k=32\n").unwrap();
        file.overlay(&cli);
        assert_eq!(file.get::<usize>("k").unwrap(), Some(32));
        assert_eq!(file.get::<u64>("seed").unwrap(), Some(1));
    }

    #[test]
    fn typed_errors_and_lists() {
        let mut c = RunConfig::parse("k=eight\nks=8, 32\n").unwrap();
        assert!(c.get::<usize>("k").is_err());
        assert!(c.require::<usize>("steps").is_err());
        assert_eq!(c.list_or::<usize>("ks", &[]).unwrap(), vec![8, 32]);
        assert_eq!(c.list_or("seeds", &[0u64, 1]).unwrap(), vec![0, 1]);
        assert_eq!(c.raw("seeds"), Some("0,1"));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            sidecar_path(Path::new("/a/b.gsae")),
            PathBuf::from("/a/b.gsae.runconfig")
        );
    }
}
