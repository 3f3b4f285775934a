//! Flat `key = value` text with `[section]` headers.
//!
//! Keys before the first header live in the unnamed section `""`. Lines
//! starting with `#` or `;` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                location: format!("line {}", i + 1),
                msg,
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
                section = name.trim().to_string();
                ini.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            let prev = ini
                .sections
                .entry(section.clone())
                .or_default()
                .insert(k.to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(err(format!("duplicate key `{}`", qualified(&section, k))));
            }
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, msg } => Error::Parse {
                location: format!("{}:{location}", path.display()),
                msg,
            },
            other => other,
        })
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Typed value; a malformed value is a config error naming `section.key`.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(qualified(section, key), format!("cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.get(section, key)?
            .ok_or_else(|| Error::config(qualified(section, key), "missing"))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(section, key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::config(qualified(section, key), format!("cannot parse `{s}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Errors on any key in `section` outside `known`.
    pub fn reject_unknown(&self, section: &str, known: &[&str]) -> Result<()> {
        if let Some(s) = self.sections.get(section) {
            if let Some(k) = s.keys().find(|k| !known.contains(&k.as_str())) {
                return Err(Error::config(qualified(section, k), "unknown key"));
            }
        }
        Ok(())
    }

    /// Every entry as `(section.key, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (String, &str)> {
        self.sections
            .iter()
            .flat_map(|(s, kv)| kv.iter().map(move |(k, v)| (qualified(s, k), v.as_str())))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, kv) in &self.sections {
            if !name.is_empty() {
                let _ = writeln!(out, "[{name}]");
            }
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}
