//! Plain-text tables: `# key: value` header lines followed by a CSV body.
//!
//! Numbers are written with 17 significant digits in exponent form, which
//! round-trips every `f64` and does not depend on locale.

use std::collections::BTreeMap;
use std::path::Path;

use crate::ensemble::PositionSpreadKernel;
use crate::error::{Error, Result};

/// Header key whose line is excluded from reproducibility comparisons.
pub const TIMESTAMP_KEY: &str = "created_unix_s";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            header: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.header.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push_numbers(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|&v| fmt_f64(v)).collect());
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn header_map(&self) -> BTreeMap<String, String> {
        self.header.iter().cloned().collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.header {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.columns).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_err(path, e))?;
        }
        let body = w.into_inner().map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        out.push_str(&String::from_utf8_lossy(&body));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let header = text
            .lines()
            .filter_map(|l| l.strip_prefix('#'))
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let columns = r
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Table { header, columns, rows })
    }

    /// A numeric column by name.
    pub fn column(&self, name: &str, path: &Path) -> Result<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: format!("missing column `{name}`"),
        })?;
        self.rows
            .iter()
            .enumerate()
            .map(|(k, r)| {
                r.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("row {}: `{name}` is not a number", k + 1),
                })
            })
            .collect()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Drop the timestamp line so two runs can be compared byte for byte.
pub fn without_timestamp(text: &str) -> String {
    let prefix = format!("# {TIMESTAMP_KEY}:");
    text.lines()
        .filter(|l| !l.starts_with(&prefix))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn kernel_table(kernel: &PositionSpreadKernel) -> Table {
    let mut t = Table::new(&["offset_m", "weight"]);
    for (off, w) in kernel.offsets().zip(kernel.weights()) {
        t.push_numbers(&[off, *w]);
    }
    t
}

/// Kernel from an `(offset_m, weight)` table. Offsets must be the symmetric
/// grid `-h·pitch ..= h·pitch`.
pub fn kernel_from_table(t: &Table, path: &Path) -> Result<PositionSpreadKernel> {
    let offsets = t.column("offset_m", path)?;
    let weights = t.column("weight", path)?;
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    match offsets.len() {
        0 => Err(bad("empty kernel")),
        1 => {
            let pitch = t
                .header_value("pitch_m")
                .and_then(|v| v.parse().ok())
                .unwrap_or(1.0);
            PositionSpreadKernel::from_weights(pitch, weights)
        }
        n => {
            let pitch = (offsets[n - 1] - offsets[0]) / (n - 1) as f64;
            let h = (n / 2) as f64;
            let regular = offsets
                .iter()
                .enumerate()
                .all(|(i, o)| (o - (i as f64 - h) * pitch).abs() <= 1e-6 * pitch);
            if !regular {
                return Err(bad("offsets must be an evenly spaced grid centred on zero"));
            }
            PositionSpreadKernel::from_weights(pitch, weights)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::build_spread_kernel;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-300, 0.0, 791.1e-9] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = Table::new(&["a", "b"]).meta("seed", 7).meta(TIMESTAMP_KEY, 123);
        t.push_numbers(&[1.0, 2.5e-9]);
        t.push_numbers(&[-3.0, 0.0]);
        t.write(&path).unwrap();
        let back = Table::read(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("b", &path).unwrap(), vec![2.5e-9, 0.0]);
        assert!(back.column("c", &path).is_err());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!without_timestamp(&text).contains(TIMESTAMP_KEY));
        assert!(without_timestamp(&text).contains("# seed: 7"));
    }

    #[test]
    fn kernel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        let k = build_spread_kernel(170e-9, 0.24e-3, 300e-6, 5e-9).unwrap();
        kernel_table(&k).write(&path).unwrap();
        let back = kernel_from_table(&Table::read(&path).unwrap(), &path).unwrap();
        assert_eq!(back.weights(), k.weights());
        assert!((back.pitch() - k.pitch()).abs() < 1e-15 * k.pitch().max(1.0));
    }
}
