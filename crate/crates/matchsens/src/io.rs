//! CSV and JSON file formats.
//!
//! Study CSVs have a header row. Covariate, outcome and treatment columns
//! are selected by name; treatment accepts `0/1` or `true/false`. Floats are
//! written in Rust's shortest round-trip form, so a write/read cycle is
//! bit-exact.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use matchsens_core::data::{StudyData, Unit};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: no column named '{column}' (found: {found})")]
    MissingColumn {
        path: PathBuf,
        column: String,
        found: String,
    },
    #[error("{path}: row {row}, column '{column}': cannot parse '{value}'")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: matchsens_core::Error,
    },
}

/// Column names of a study file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct StudyColumns {
    pub covariates: Vec<String>,
    pub outcome: String,
    pub treatment: String,
}

impl Default for StudyColumns {
    fn default() -> Self {
        Self {
            covariates: vec!["x".into()],
            outcome: "y".into(),
            treatment: "z".into(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_treatment(s: &str) -> Option<bool> {
    match s.trim() {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

pub fn read_study_csv(path: &Path, columns: &StudyColumns) -> Result<StudyData, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IoError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
                found: headers.iter().collect::<Vec<_>>().join(", "),
            })
    };
    let cov_idx = columns
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;
    let y_idx = find(&columns.outcome)?;
    let z_idx = find(&columns.treatment)?;

    let mut units = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        // 1-based data rows, header excluded
        let row = i + 1;
        let bad = |col: usize, name: &str| IoError::Parse {
            path: path.to_path_buf(),
            row,
            column: name.to_string(),
            value: record.get(col).unwrap_or("").to_string(),
        };
        let float = |col: usize, name: &str| {
            record
                .get(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(col, name))
        };
        let covariates = cov_idx
            .iter()
            .zip(&columns.covariates)
            .map(|(&c, name)| float(c, name))
            .collect::<Result<Vec<_>, _>>()?;
        let outcome = float(y_idx, &columns.outcome)?;
        let treated = record
            .get(z_idx)
            .and_then(parse_treatment)
            .ok_or_else(|| bad(z_idx, &columns.treatment))?;
        units.push(Unit::new(covariates, outcome, treated));
    }
    StudyData::new(units).map_err(|source| IoError::Data {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_study_csv(
    path: &Path,
    data: &StudyData,
    columns: &StudyColumns,
) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<&str> = columns.covariates.iter().map(String::as_str).collect();
    header.push(&columns.outcome);
    header.push(&columns.treatment);
    writer.write_record(&header).map_err(csv_err(path))?;
    for u in data.units() {
        let mut row: Vec<String> = u.covariates.iter().map(|x| x.to_string()).collect();
        row.push(u.outcome.to_string());
        row.push(if u.treated { "1" } else { "0" }.into());
        writer.write_record(&row).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Write rows of serializable records to a CSV with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        writer.serialize(r).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn ensure_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns() -> StudyColumns {
        StudyColumns {
            covariates: vec!["x1".into(), "x2".into()],
            outcome: "y".into(),
            treatment: "z".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = StudyData::new(vec![
            Unit::new(vec![0.1 + 0.2, -1e-300], std::f64::consts::PI, true),
            Unit::new(vec![1.0 / 3.0, 5e300], -0.0, false),
        ])
        .unwrap();
        write_study_csv(&path, &data, &columns()).unwrap();
        let back = read_study_csv(&path, &columns()).unwrap();
        for (a, b) in data.units().iter().zip(back.units()) {
            assert_eq!(a.outcome.to_bits(), b.outcome.to_bits());
            assert_eq!(a.treated, b.treated);
            for (u, v) in a.covariates.iter().zip(&b.covariates) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn parse_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "x1,x2,y,z\n0.1,0.2,1.0,1\n0.3,abc,2.0,0\n").unwrap();
        let err = read_study_csv(&path, &columns()).unwrap_err().to_string();
        assert!(
            err.contains("row 2") && err.contains("'x2'") && err.contains("abc"),
            "{err}"
        );

        fs::write(&path, "x1,x2,y,z\n0.1,0.2,1.0,yes\n").unwrap();
        let err = read_study_csv(&path, &columns()).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("'z'"), "{err}");
    }

    #[test]
    fn missing_column_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "x1,y,z\n0.1,1.0,1\n").unwrap();
        let err = read_study_csv(&path, &columns()).unwrap_err().to_string();
        assert!(err.contains("'x2'"), "{err}");
        let missing = dir.path().join("nope.csv");
        let err = read_study_csv(&missing, &columns())
            .unwrap_err()
            .to_string();
        assert!(err.contains("nope.csv"), "{err}");
    }
}
