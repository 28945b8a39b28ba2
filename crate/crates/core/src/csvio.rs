//! Small helpers shared by every CSV reader and writer in the crate.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: line {line}: cannot parse `{value}` in column `{column}`")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}: expected header {expected:?}, found {found:?}")]
    Header {
        path: PathBuf,
        expected: Vec<String>,
        found: Vec<String>,
    },
}

/// Column-name lookup for a header row.
#[derive(Debug, Clone)]
pub struct HeaderIndex {
    path: PathBuf,
    positions: HashMap<String, usize>,
}

impl HeaderIndex {
    pub fn new(path: &Path, headers: &csv::StringRecord) -> Self {
        let positions = headers
            .iter()
            .enumerate()
            .map(|(i, name)| (name.trim().trim_start_matches('\u{feff}').to_string(), i))
            .collect();
        Self {
            path: path.to_path_buf(),
            positions,
        }
    }

    pub fn require(&self, column: &str) -> Result<usize, CsvError> {
        self.positions
            .get(column)
            .copied()
            .ok_or_else(|| CsvError::MissingColumn {
                path: self.path.clone(),
                column: column.to_string(),
            })
    }

    pub fn optional(&self, column: &str) -> Option<usize> {
        self.positions.get(column).copied()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn open_reader(path: &Path) -> Result<csv::Reader<File>, CsvError> {
    let file = File::open(path).map_err(|source| CsvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

pub fn headers(reader: &mut csv::Reader<File>, path: &Path) -> Result<HeaderIndex, CsvError> {
    let headers = reader.headers().map_err(|source| CsvError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(HeaderIndex::new(path, headers))
}

/// Reads the next record into `record`; `Ok(false)` at end of file.
pub fn next_record(
    reader: &mut csv::Reader<File>,
    record: &mut csv::StringRecord,
    path: &Path,
) -> Result<bool, CsvError> {
    reader.read_record(record).map_err(|source| CsvError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub fn field(record: &csv::StringRecord, idx: usize) -> &str {
    record.get(idx).unwrap_or("")
}

pub fn parse_field<T: std::str::FromStr>(
    header: &HeaderIndex,
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
) -> Result<T, CsvError> {
    let raw = field(record, idx);
    raw.parse::<T>().map_err(|_| CsvError::Parse {
        path: header.path().to_path_buf(),
        line: line_of(record),
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Shortest decimal representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Buffered CSV writer producing `\n`-terminated, comma-separated rows.
pub struct CsvSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvSink {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CsvError> {
        let file = File::create(path).map_err(|source| CsvError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut sink = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        sink.row(header.iter().copied())?;
        Ok(sink)
    }

    pub fn row<I, S>(&mut self, cells: I) -> Result<(), CsvError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut line = String::new();
        for (i, cell) in cells.into_iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(cell.as_ref());
        }
        line.push('\n');
        self.out.write_all(line.as_bytes()).map_err(|source| CsvError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn finish(mut self) -> Result<(), CsvError> {
        self.out.flush().map_err(|source| CsvError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Fails unless the file's header row is exactly `expected`.
pub fn expect_header(path: &Path, found: &HeaderIndex, expected: &[&str]) -> Result<(), CsvError> {
    let mut names: Vec<(usize, &String)> = found.positions.iter().map(|(k, v)| (*v, k)).collect();
    names.sort();
    let found: Vec<String> = names.into_iter().map(|(_, n)| n.clone()).collect();
    if found.iter().map(String::as_str).eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(CsvError::Header {
            path: path.to_path_buf(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        })
    }
}
