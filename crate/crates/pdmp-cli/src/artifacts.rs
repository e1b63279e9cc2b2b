//! Artifact writers: RFC-4180 CSV with '.' decimal separator and 17
//! significant digits, and JSON reports with a stable key order. Nothing
//! here writes timestamps, so identical configurations reproduce
//! byte-identical files.

use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvWriter {
    buf: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut w = CsvWriter {
            buf: String::new(),
            columns: header.len(),
        };
        w.push_row_strings(header.iter().map(|s| s.to_string()));
        w
    }

    pub fn row(&mut self, cells: &[CsvCell]) {
        assert_eq!(cells.len(), self.columns, "column count mismatch");
        self.push_row_strings(cells.iter().map(|c| c.render()));
    }

    fn push_row_strings(&mut self, cells: impl Iterator<Item = String>) {
        let mut first = true;
        for cell in cells {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(&cell);
            first = false;
        }
        self.buf.push_str("\r\n");
    }

    pub fn write(&self, path: &Path) -> Result<(), String> {
        write_bytes(path, self.buf.as_bytes())
    }
}

pub enum CsvCell {
    Int(i64),
    Float(f64),
}

impl CsvCell {
    fn render(&self) -> String {
        match self {
            CsvCell::Int(v) => v.to_string(),
            CsvCell::Float(v) => fmt_f64(*v),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| format!("serialize {}: {e}", path.display()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("mkdir {}: {e}", dir.display()))?;
    }
    let mut file = fs::File::create(path).map_err(|e| format!("create {}: {e}", path.display()))?;
    file.write_all(bytes)
        .map_err(|e| format!("write {}: {e}", path.display()))
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, std::f64::consts::PI] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v, back, "{s}");
            assert!(s.contains('.'), "decimal separator missing in {s}");
        }
    }

    #[test]
    fn csv_shape() {
        let mut w = CsvWriter::new(&["a", "b"]);
        w.row(&[CsvCell::Int(1), CsvCell::Float(0.5)]);
        assert_eq!(w.buf.matches("\r\n").count(), 2);
        assert!(w.buf.starts_with("a,b\r\n1,"));
    }
}
