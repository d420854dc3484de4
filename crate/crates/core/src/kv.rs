//! Line-oriented `key=value` text used for configs and render sidecars.
//!
//! Blank lines and lines starting with `#` are ignored. Keys keep their file
//! order; a repeated key overrides the earlier value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
    lines: BTreeMap<String, usize>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: format!("expected key=value, got '{line}'"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "empty key".into(),
                });
            }
            kv.insert_at(key, v.trim(), i + 1);
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    fn insert_at(&mut self, key: &str, value: &str, line: usize) {
        if let Some(slot) = self.entries.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
        } else {
            self.entries.push((key.to_string(), value.to_string()));
        }
        self.lines.insert(key.to_string(), line);
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let line = self.lines.get(key).copied().unwrap_or(0);
        self.insert_at(key, &value.to_string(), line);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Parses `key` if present, leaving `target` untouched otherwise.
    pub fn read_into<T: FromStr>(&self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.get(key) {
            *target = raw.parse().map_err(|e: T::Err| Error::Parse {
                line: self.lines.get(key).copied().unwrap_or(0),
                reason: format!("{key}: {e}"),
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let kv = KeyValues::parse("# rig\nspeed = 8\n\nseed=1\nseed=2\n").unwrap();
        assert_eq!(kv.get("speed"), Some("8"));
        assert_eq!(kv.get("seed"), Some("2"));
        let mut s = 0u64;
        kv.read_into("seed", &mut s).unwrap();
        assert_eq!(s, 2);
        let mut untouched = 7.5f64;
        kv.read_into("missing", &mut untouched).unwrap();
        assert_eq!(untouched, 7.5);
    }

    #[test]
    fn errors_name_the_line() {
        match KeyValues::parse("a=1\nnonsense\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let kv = KeyValues::parse("a=1\nb=x\n").unwrap();
        let mut b = 0.0f64;
        match kv.read_into("b", &mut b) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KeyValues::new();
        kv.set("r_mm", 2.5);
        kv.set("center_u", 100);
        assert_eq!(
            KeyValues::parse(&kv.to_text()).unwrap().get("r_mm"),
            Some("2.5")
        );
    }
}
