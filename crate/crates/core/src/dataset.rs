//! Feature matrices, label vectors and their on-disk formats.
//!
//! Two matrix formats are supported:
//!
//! * **binary**: the 4 magic bytes `RPML`, a little-endian `u32` version
//!   (currently 1), `u64` row count, `u64` column count, then the entries in
//!   row-major order as little-endian `f32`.
//! * **csv**: comma separated, `.` as decimal point, with an optional single
//!   header line (detected when the first token of the first line is not a
//!   number). Values are written with 9 significant digits, which is enough
//!   to round-trip every `f32`.
//!
//! Labels are stored one non-negative integer per line.
//!
//! Storage is single precision while all computation is done in `f64`, so a
//! saved matrix reloads as its `f32`-rounded value.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RPML";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Dense `n × d` matrix of example descriptors, one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
}

impl FeatureMatrix {
    /// Wraps a matrix after checking that it is non-empty and finite.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyDataset);
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Format {
                    row: i,
                    message: format!("expected {d} values, found {}", row.len()),
                });
            }
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    /// Number of examples.
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    /// Row `i` as a column vector.
    pub fn row(&self, i: usize) -> nalgebra::DVector<f64> {
        self.values.row(i).transpose()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(idx),
        }
    }
}

/// One non-negative integer label per example.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    labels: Vec<usize>,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.labels
    }

    /// Number of distinct label values.
    pub fn num_classes(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.labels.len() != n {
            return Err(Error::Dimension(format!(
                "label vector has {} entries but the feature matrix has {n} rows",
                self.labels.len()
            )));
        }
        Ok(())
    }
}

impl From<Vec<usize>> for LabelVector {
    fn from(labels: Vec<usize>) -> Self {
        Self::new(labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Binary,
}

impl MatrixFormat {
    /// `.csv`/`.txt`/`.tsv` extensions are read as CSV, everything else as binary.
    pub fn from_path(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("csv") | Some("txt") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }
}

impl std::str::FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "binary" | "bin" => Ok(MatrixFormat::Binary),
            other => Err(Error::Parameter(format!(
                "unknown matrix format `{other}` (expected csv or binary)"
            ))),
        }
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Loads a feature matrix, validating shape and finiteness.
pub fn load_features(path: &Path, format: MatrixFormat) -> Result<FeatureMatrix> {
    let m = load_matrix(path, format)?;
    FeatureMatrix::new(m)
}

pub fn save_features(features: &FeatureMatrix, path: &Path, format: MatrixFormat) -> Result<()> {
    save_matrix(features.values(), path, format)
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<DMatrix<f64>> {
    match format {
        MatrixFormat::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(BufReader::new(file)).map_err(|e| with_path(e, path))
        }
        MatrixFormat::Binary => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            read_binary(BufReader::new(file)).map_err(|e| with_path(e, path))
        }
    }
}

pub fn save_matrix(m: &DMatrix<f64>, path: &Path, format: MatrixFormat) -> Result<()> {
    check_finite(m)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        MatrixFormat::Csv => write_csv(&mut w, m),
        MatrixFormat::Binary => write_binary(&mut w, m),
    }
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(path, e))
}

/// Writes a `d × l` embedding in the binary container.
pub fn save_embedding(l: &DMatrix<f64>, path: &Path) -> Result<()> {
    save_matrix(l, path, MatrixFormat::Binary)
}

pub fn load_embedding(path: &Path) -> Result<DMatrix<f64>> {
    let m = load_matrix(path, MatrixFormat::Binary)?;
    check_finite(&m)?;
    Ok(m)
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub fn write_binary<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.nrows() * m.ncols() * 4);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn read_binary<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(|_| Error::Format {
        row: 0,
        message: "truncated header".into(),
    })?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format {
            row: 0,
            message: "bad magic bytes (expected RPML)".into(),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            row: 0,
            message: format!("unsupported format version {version}"),
        });
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyDataset);
    }
    let len = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Format {
            row: 0,
            message: format!("header dimensions {rows}x{cols} overflow"),
        })?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io("<stream>", e))?;
    if payload.len() != len {
        return Err(Error::Format {
            row: payload.len() / 4 / cols,
            message: format!(
                "payload has {} bytes, header announces {rows}x{cols} ({len} bytes)",
                payload.len()
            ),
        });
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        let (i, j) = (k / cols, k % cols);
        if !v.is_finite() {
            return Err(Error::NonFinite { row: i, col: j });
        }
        m[(i, j)] = v as f64;
    }
    Ok(m)
}

pub fn write_csv<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                w.write_all(b",")?;
            }
            write!(w, "{:.8e}", m[(i, j)] as f32)?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses CSV text. Row indices in errors count data rows from 0, excluding
/// any header line.
pub fn read_csv<R: BufRead>(r: R) -> Result<DMatrix<f64>> {
    let mut values: Vec<f64> = Vec::new();
    let mut cols: Option<usize> = None;
    let mut row = 0usize;
    let mut first = true;
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if first {
            first = false;
            let head = line.split(',').next().unwrap_or("").trim();
            if head.parse::<f64>().is_err() {
                continue;
            }
        }
        let start = values.len();
        for (j, tok) in line.split(',').enumerate() {
            let v: f32 = tok.trim().parse().map_err(|_| Error::Format {
                row,
                message: format!("column {j}: cannot parse `{}` as a number", tok.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: j });
            }
            values.push(v as f64);
        }
        let len = values.len() - start;
        match cols {
            None => cols = Some(len),
            Some(c) if c != len => {
                return Err(Error::Format {
                    row,
                    message: format!("expected {c} values, found {len}"),
                })
            }
            _ => {}
        }
        row += 1;
    }
    let cols = cols.ok_or(Error::EmptyDataset)?;
    Ok(DMatrix::from_row_slice(row, cols, &values))
}

pub fn load_labels(path: &Path) -> Result<LabelVector> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (row, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let tok = line.trim();
        if tok.is_empty() {
            continue;
        }
        let v: usize = tok.parse().map_err(|_| Error::Format {
            row,
            message: format!("`{tok}` is not a non-negative integer label"),
        })?;
        labels.push(v);
    }
    Ok(LabelVector::new(labels))
}

pub fn save_labels(labels: &LabelVector, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    labels
        .as_slice()
        .iter()
        .try_for_each(|l| writeln!(w, "{l}"))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
