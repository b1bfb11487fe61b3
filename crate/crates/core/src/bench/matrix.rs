//! Device × column throughput tables with missing cells.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("cell ({row}, {col}) holds {value}; throughput must be positive")]
    NonPositive { row: String, col: String, value: f64 },
    #[error("row {row} has {got} cells, expected {expected}")]
    RowLength { row: String, got: usize, expected: usize },
    #[error("cannot parse {0:?} as a throughput")]
    Parse(String),
    #[error("header must start with a device column and name at least one column")]
    Header,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Rows are devices, columns are configs or workloads. CSV layout:
/// `device,<col>,...` then one line per device, empty for a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    cells: Vec<Option<f64>>,
}

impl ThroughputMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>) -> Self {
        let cells = vec![None; rows.len() * cols.len()];
        Self { rows, cols, cells }
    }

    /// Fully populated matrix from row-major values.
    pub fn from_rows(rows: &[&str], cols: &[&str], values: &[&[f64]]) -> Result<Self, MatrixError> {
        let mut m = Self::new(
            rows.iter().map(|s| s.to_string()).collect(),
            cols.iter().map(|s| s.to_string()).collect(),
        );
        for (r, line) in values.iter().enumerate() {
            if line.len() != cols.len() {
                return Err(MatrixError::RowLength {
                    row: rows[r].to_string(),
                    got: line.len(),
                    expected: cols.len(),
                });
            }
            for (c, &v) in line.iter().enumerate() {
                m.set(r, c, Some(v))?;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.cols.len() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Option<f64>) -> Result<(), MatrixError> {
        if let Some(v) = value {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MatrixError::NonPositive {
                    row: self.rows[row].clone(),
                    col: self.cols[col].clone(),
                    value: v,
                });
            }
        }
        self.cells[row * self.cols.len() + col] = value;
        Ok(())
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        let n = self.cols.len();
        &self.cells[row * n..(row + 1) * n]
    }

    /// Multiply every present cell of `row` by `factor`.
    pub fn scale_row(&mut self, row: usize, factor: f64) -> Result<(), MatrixError> {
        for c in 0..self.cols.len() {
            let v = self.get(row, c).map(|v| v * factor);
            self.set(row, c, v)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(src: R) -> Result<Self, MatrixError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(src);
        let header = reader.headers()?.clone();
        if header.len() < 2 {
            return Err(MatrixError::Header);
        }
        let cols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for record in reader.records() {
            let record = record?;
            let name = record.get(0).unwrap_or_default().to_string();
            if record.len() != header.len() {
                return Err(MatrixError::RowLength {
                    row: name,
                    got: record.len().saturating_sub(1),
                    expected: cols.len(),
                });
            }
            for field in record.iter().skip(1) {
                let field = field.trim();
                cells.push(match field {
                    "" => None,
                    s => Some(s.parse::<f64>().map_err(|_| MatrixError::Parse(s.to_string()))?),
                });
            }
            rows.push(name);
        }
        let mut m = Self::new(rows, cols);
        for (i, v) in cells.into_iter().enumerate() {
            let n = m.cols.len();
            m.set(i / n, i % n, v)?;
        }
        Ok(m)
    }

    pub fn write_csv<W: Write>(&self, dst: W) -> Result<(), MatrixError> {
        let mut w = csv::Writer::from_writer(dst);
        w.write_record(std::iter::once("device").chain(self.cols.iter().map(String::as_str)))?;
        for (r, name) in self.rows.iter().enumerate() {
            let fields = self.row(r).iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default());
            w.write_record(std::iter::once(name.clone()).chain(fields))?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
