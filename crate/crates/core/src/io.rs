//! CSV tables and their JSON sidecars.
//!
//! Every CSV is comma-separated with a header row, LF line endings and
//! numbers printed with 17 significant digits, so a write/read round trip is
//! exact. Each table `name.csv` has a sidecar `name.csv.json` carrying the
//! config hash of the run that produced it.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Format with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // keep the sign of -0.0 out of the files
        return format!("{:.16e}", 0.0);
    }
    format!("{x:.16e}")
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(header.join(",").as_bytes())?;
    out.write_all(b"\n")?;
    for row in rows {
        let row = row.as_ref();
        if row.len() != header.len() {
            return Err(Error::format(path.display().to_string(), "row length differs from header"));
        }
        let line: Vec<String> = row.iter().map(|x| fmt_f64(*x)).collect();
        out.write_all(line.join(",").as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn expect_header(&self, names: &[&str]) -> Result<()> {
        if self.header.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::format("csv header", format!("expected {names:?}, found {:?}", self.header)));
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let k = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("csv", format!("missing column {name}")))?;
        Ok(self.rows.iter().map(|r| r[k]).collect())
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(path.display().to_string(), "empty file"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", k + 2)))?;
        if row.len() != header.len() {
            return Err(Error::format(path.display().to_string(), format!("line {} has {} fields", k + 2, row.len())));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub columns: Vec<String>,
    pub rows: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Write a table and its hash-carrying sidecar.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>], config_hash: &str) -> Result<()> {
    write_csv(path, header, rows)?;
    let side = Sidecar {
        config_hash: config_hash.to_string(),
        columns: header.iter().map(|s| s.to_string()).collect(),
        rows: rows.len(),
    };
    write_json(&sidecar_path(path), &side)
}

/// Read a table after checking that its sidecar matches `config_hash`.
pub fn read_table(path: &Path, config_hash: &str) -> Result<Table> {
    let side: Sidecar = read_json(&sidecar_path(path))?;
    if side.config_hash != config_hash {
        return Err(Error::HashMismatch {
            file: path.display().to_string(),
            expected: config_hash.to_string(),
            found: side.config_hash,
        });
    }
    read_csv(path)
}
