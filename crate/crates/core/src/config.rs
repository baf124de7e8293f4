//! Line-oriented `key = value` files with optional `[section]` headers.
//!
//! `#` starts a comment. Keys are unique within a section.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    /// Empty for keys before the first header.
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvFile {
    pub path: Option<PathBuf>,
    pub entries: Vec<KvEntry>,
}

impl KvFile {
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<config>")),
            line,
            msg,
        };
        let mut section = String::new();
        let mut entries: Vec<KvEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| perr(line, format!("unterminated section header '{content}'")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| perr(line, format!("expected 'key = value', got '{content}'")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(perr(line, "empty key".into()));
            }
            if entries.iter().any(|e| e.section == section && e.key == key) {
                return Err(perr(line, format!("duplicate key '{key}'")));
            }
            entries.push(KvEntry {
                section: section.clone(),
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Self {
            path: path.map(Path::to_path_buf),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Some(path))
    }

    pub fn section<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a KvEntry> + 'a {
        self.entries.iter().filter(move |e| e.section == name)
    }

    /// Directory against which relative paths in the file resolve.
    pub fn base_dir(&self) -> PathBuf {
        self.path
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }
}

/// Parses `value` for `key`, reporting the key on failure.
pub fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("invalid value '{value}' for key '{key}': {e}")))
}

pub fn unknown_key(section: &str, key: &str) -> Error {
    if section.is_empty() {
        Error::Config(format!("unknown key '{key}'"))
    } else {
        Error::Config(format!("unknown key '{key}' in section [{section}]"))
    }
}

/// Renders `(key, value)` pairs under a section header.
pub fn render_section(name: &str, pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    if !name.is_empty() {
        out.push_str(&format!("[{name}]\n"));
    }
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
