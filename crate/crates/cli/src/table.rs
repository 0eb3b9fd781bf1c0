//! Comma-separated tables with a one-line provenance comment and an explicit
//! `NA` sentinel for missing or non-finite values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::CliError;

pub const NA: &str = "NA";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Shortest round-trip form; exponent notation outside `[1e-4, 1e15)`.
pub fn num(v: f64) -> String {
    if !v.is_finite() {
        return NA.to_string();
    }
    let m = v.abs();
    if m == 0.0 || (1e-4..1e15).contains(&m) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), num)
}

pub fn opt_bool(v: Option<bool>) -> String {
    v.map_or_else(|| NA.to_string(), |b| b.to_string())
}

pub fn opt_int<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

/// Writes `header` and `rows` to `path`, preceded by a comment naming the
/// manifest that describes the run.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# manifest: {MANIFEST_FILE}").map_err(CliError::io(path))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(CliError::csv(path))?;
    for r in rows {
        debug_assert_eq!(r.len(), header.len(), "row width");
        w.write_record(r).map_err(CliError::csv(path))?;
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(())
}

/// A table read back by column name.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<csv::StringRecord>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(CliError::csv(path))?;
        let header: Vec<String> = r.headers().map_err(CliError::csv(path))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::csv(path))?;
        let index = header.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
        Ok(Self { header, rows, index })
    }

    pub fn has(&self, col: &str) -> bool {
        self.index.contains_key(col)
    }

    pub fn col(&self, name: &str) -> Result<usize, CliError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| CliError::Data(format!("missing column {name:?}")))
    }

    pub fn str<'a>(&self, row: &'a csv::StringRecord, col: usize) -> &'a str {
        row.get(col).unwrap_or(NA)
    }

    /// `None` for the sentinel; an error for anything else unparsable.
    pub fn f64(&self, row: &csv::StringRecord, col: usize) -> Result<Option<f64>, CliError> {
        let s = self.str(row, col);
        if s == NA || s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| CliError::Data(format!("column {:?}: not a number: {s:?}", self.header[col])))
    }

    pub fn bool(&self, row: &csv::StringRecord, col: usize) -> Result<Option<bool>, CliError> {
        match self.str(row, col) {
            "true" => Ok(Some(true)),
            "false" => Ok(Some(false)),
            NA | "" => Ok(None),
            s => Err(CliError::Data(format!("column {:?}: not a boolean: {s:?}", self.header[col]))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentinel_round_trip() {
        assert_eq!(num(f64::NAN), NA);
        assert_eq!(opt(None), NA);
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(2.2e-16), "2.2e-16");
        assert_eq!(num(-3e20), "-3e20");
        assert_eq!(num(0.0), "0");
        for v in [1.0 / 3.0, 1.234e-300, 6.02e23, -7.5e-5] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_table(&p, &["x", "b"], &[vec![num(1.5e-300), "true".into()], vec![opt(None), opt_bool(None)]]).unwrap();
        let t = Table::read(&p).unwrap();
        let (x, b) = (t.col("x").unwrap(), t.col("b").unwrap());
        assert_eq!(t.f64(&t.rows[0], x).unwrap(), Some(1.5e-300));
        assert_eq!(t.bool(&t.rows[0], b).unwrap(), Some(true));
        assert_eq!(t.f64(&t.rows[1], x).unwrap(), None);
        assert!(t.col("missing").is_err());
    }
}
