//! Line-oriented `key = value` text format shared by run configs and
//! archive manifests.
//!
//! Grammar:
//!
//! ```text
//! file    := line*
//! line    := blank | comment | entry
//! comment := ws* '#' any*
//! entry   := ws* key ws* '=' ws* value ws*
//! key     := segment ('.' segment)*
//! segment := [A-Za-z0-9_]+
//! value   := any character except newline (trailing whitespace trimmed)
//! ```
//!
//! Keys may appear at most once per file.

use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub(crate) fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config {
                line,
                detail: format!("expected `key = value`, found `{trimmed}`"),
            });
        };
        let key = key.trim();
        let valid = !key.is_empty()
            && key.split('.').all(|seg| {
                !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            });
        if !valid {
            return Err(Error::Config {
                line,
                detail: format!("malformed key `{key}`"),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config {
                line,
                detail: format!("duplicate key `{key}`"),
            });
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

pub(crate) fn parse_value<T: std::str::FromStr>(entry: &Entry) -> Result<T> {
    entry.value.parse().map_err(|_| Error::Config {
        line: entry.line,
        detail: format!("invalid value `{}` for `{}`", entry.value, entry.key),
    })
}
