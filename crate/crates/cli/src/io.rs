//! File formats: model spec JSON, 0/1 response CSV, profile CSV, and
//! atomic output writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mcmle::GlmmDesign;
use sha2::{Digest, Sha256};

use crate::CliError;

/// File contents together with their SHA-256, for provenance.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub value: T,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_spec(path: &Path) -> Result<Loaded<GlmmDesign>, CliError> {
    let bytes = read_bytes(path)?;
    let design: GlmmDesign = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Input(format!("{}: invalid model spec: {e}", path.display())))?;
    Ok(Loaded {
        value: design,
        sha256: sha256_hex(&bytes),
    })
}

/// Parses 0/1 response records, one per row.
///
/// A first row with no numeric cell is taken as a header. Every other row
/// must have the same number of cells, each `0` or `1`; errors report the
/// 1-based line and column.
pub fn parse_responses(text: &str) -> Result<Vec<Vec<u8>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut width = None;
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CliError::Input(format!("malformed CSV: {e}")))?;
        let line = row.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        if row.iter().all(|c| c.is_empty()) {
            continue;
        }
        if records.is_empty() && width.is_none() && row.iter().all(|c| c.parse::<f64>().is_err()) {
            // header
            width = Some(row.len());
            continue;
        }
        let expected = *width.get_or_insert(row.len());
        if row.len() != expected {
            return Err(CliError::Input(format!(
                "row {line}: found {} columns, expected {expected}",
                row.len()
            )));
        }
        let mut rec = Vec::with_capacity(row.len());
        for (col, cell) in row.iter().enumerate() {
            rec.push(match cell {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(CliError::Input(format!(
                        "row {line}, column {}: expected 0 or 1, found {other:?}",
                        col + 1
                    )))
                }
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::Input("data file has no records".into()));
    }
    Ok(records)
}

pub fn read_responses(path: &Path) -> Result<Loaded<Vec<Vec<u8>>>, CliError> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Input(format!("{}: not UTF-8 text", path.display())))?;
    let records = parse_responses(text).map_err(|e| match e {
        CliError::Input(msg) => CliError::Input(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(Loaded {
        value: records,
        sha256: sha256_hex(&bytes),
    })
}

pub fn format_responses(records: &[Vec<u8>]) -> String {
    let mut out = String::with_capacity(records.len() * records.first().map_or(0, |r| 2 * r.len()));
    for rec in records {
        let cells: Vec<&str> = rec.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let io_err = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// `lo:hi:k` → `k` evenly spaced values from `lo` to `hi` inclusive.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |why: &str| CliError::Input(format!("grid {spec:?}: {why} (expected lo:hi:k)"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad("need three fields"));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad("lo is not a number"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad("hi is not a number"))?;
    let k: usize = parts[2].trim().parse().map_err(|_| bad("k is not a positive integer"))?;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(bad("bounds must be finite"));
    }
    if k == 0 {
        return Err(bad("k must be at least 1"));
    }
    if hi < lo {
        return Err(bad("hi is below lo"));
    }
    if k == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (k - 1) as f64;
    Ok((0..k).map(|i| if i == k - 1 { hi } else { lo + step * i as f64 }).collect())
}

/// Comma-separated parameter values.
pub fn parse_values(what: &str, spec: &str) -> Result<Vec<f64>, CliError> {
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CliError::Input(format!("{what}: {v:?} is not a finite number")))
        })
        .collect()
}

/// A profile table as written to CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ProfileTable {
    /// Numbers use the shortest decimal form that parses back to the same
    /// binary64 value.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let columns = reader
            .headers()
            .map_err(|e| CliError::Input(format!("profile CSV header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| CliError::Input(format!("profile CSV: {e}")))?;
            let vals = row
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| CliError::Input(format!("profile CSV: bad number {c:?}"))))
                .collect::<Result<_, _>>()?;
            rows.push(vals);
        }
        Ok(Self { columns, rows })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = read_bytes(path)?;
        Self::from_csv(&String::from_utf8_lossy(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_detected() {
        let with = parse_responses("y1,y2,y3\n1,0,1\n0,0,1\n").unwrap();
        let without = parse_responses("1,0,1\n0,0,1\n").unwrap();
        assert_eq!(with, without);
        assert_eq!(with, vec![vec![1, 0, 1], vec![0, 0, 1]]);
    }

    #[test]
    fn bad_cells_name_row_and_column() {
        let err = parse_responses("1,0,1\n0,2,1\n").unwrap_err().to_string();
        assert!(err.contains("row 2, column 2"), "{err}");
        let err = parse_responses("1,0,1\n0,1\n").unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("2 columns"), "{err}");
        let err = parse_responses("t1,t2\n1,x\n").unwrap_err().to_string();
        assert!(err.contains("row 2, column 2"), "{err}");
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("2:2:1").unwrap(), vec![2.0]);
        assert_eq!(parse_grid("0.1:0.3:3").unwrap().last(), Some(&0.3));
        for bad in ["0:1", "a:1:2", "0:1:0", "1:0:3", "0:1:x"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn profile_csv_round_trip() {
        let t = ProfileTable {
            columns: vec!["grid_value".into(), "profile_loglik".into(), "beta1".into()],
            rows: vec![vec![0.1, -123.456_789_012_345_67, 1.0 / 3.0], vec![0.2, -1e-300, 5e300]],
        };
        assert_eq!(ProfileTable::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn responses_round_trip() {
        let recs = vec![vec![1, 0, 0, 1], vec![0, 0, 0, 0]];
        assert_eq!(parse_responses(&format_responses(&recs)).unwrap(), recs);
    }
}
