//! Atomic artifact writing and small text-formatting helpers.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use csmart::data::format_float;

use crate::error::CliError;

pub struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|source| CliError::Write { path: root.to_path_buf(), source })?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        let err = |source| CliError::Write { path: path.clone(), source };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root).map_err(err)?;
        tmp.write_all(bytes).map_err(err)?;
        tmp.as_file().sync_all().map_err(err)?;
        tmp.persist(&path).map_err(|e| err(e.error))?;
        self.written.push(path);
        Ok(())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

pub fn json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

/// Tab-separated table with a header row.
pub struct Tsv {
    text: String,
}

impl Tsv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join("\t");
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join("\t"));
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub fn num(v: f64) -> String {
    format_float(v)
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_float)
}

/// Key-value report with titled sections and aligned tables.
#[derive(Default)]
pub struct Report {
    text: String,
}

impl Report {
    pub fn header(command: &str, config_hash: &str) -> Self {
        let mut r = Self::default();
        r.kv("tool", &format!("csmart {}", crate::config::VERSION));
        r.kv("command", command);
        r.kv("config_hash", config_hash);
        r
    }

    pub fn kv(&mut self, key: &str, value: &str) {
        let _ = writeln!(self.text, "{key}: {value}");
    }

    pub fn section(&mut self, title: &str) {
        let _ = writeln!(self.text, "\n[{title}]");
    }

    pub fn table(&mut self, header: &[&str], rows: &[Vec<String>]) {
        let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for r in rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: Vec<&str>| {
            let padded: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
            padded.join("  ").trim_end().to_string()
        };
        let _ = writeln!(self.text, "{}", line(header.to_vec()));
        for r in rows {
            let _ = writeln!(self.text, "{}", line(r.iter().map(String::as_str).collect()));
        }
    }

    pub fn line(&mut self, s: &str) {
        let _ = writeln!(self.text, "{s}");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub fn fixed(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "NA".to_string()
    }
}
