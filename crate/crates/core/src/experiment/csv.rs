//! Headered numeric CSV: trajectories, samples, and decay reports.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Numeric table with named columns. Empty fields are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = ::csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if headers.iter().all(|h| h.is_empty()) {
            return Err(Error::Schema("missing header row".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Schema(format!("row {}: {e}", i + 1)))?;
            let row = rec
                .iter()
                .map(|f| {
                    let f = f.trim();
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::Schema(format!("row {}: `{f}` is not a number", i + 1)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { headers, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }

    /// Every value of column `name`; empty fields are an error.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[c].ok_or_else(|| Error::Schema(format!("column `{name}` is empty in row {}", i + 1))))
            .collect()
    }

    /// Indices of columns named `{prefix}{k}`, ordered by `k`.
    pub fn prefixed(&self, prefix: &str) -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = self
            .headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(prefix)?.parse::<usize>().ok().map(|k| (k, i)))
            .collect();
        cols.sort();
        cols.into_iter().map(|(_, i)| i).collect()
    }

    /// Columns `{prefix}1..` as a dense matrix, one row per record.
    pub fn matrix(&self, prefix: &str) -> Result<DMatrix<f64>> {
        let cols = self.prefixed(prefix);
        if cols.is_empty() {
            return Err(Error::Schema(format!("missing column `{prefix}1`")));
        }
        let mut m = DMatrix::zeros(self.rows.len(), cols.len());
        for (i, row) in self.rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                m[(i, j)] = row[c].ok_or_else(|| Error::Schema(format!("column `{}` is empty in row {}", self.headers[c], i + 1)))?;
            }
        }
        Ok(m)
    }
}

/// Samples as CSV with columns `x1..xd`.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = (1..=m.ncols()).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|&v| crate::dynamics::fmt_f64(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn read_samples(path: &Path) -> Result<DMatrix<f64>> {
    let t = Table::read(path)?;
    if t.rows.is_empty() {
        return Err(Error::Schema(format!("{} has no rows", path.display())));
    }
    t.matrix("x")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_select() {
        let t = Table::parse("time,sv_2,sv_1,D_1\n0,1.5,2,\n1,0.5,1,3\n").unwrap();
        assert_eq!(t.column("time").unwrap(), vec![0.0, 1.0]);
        assert_eq!(t.prefixed("sv_"), vec![2, 1]);
        assert!(t.column("D_1").is_err());
        assert!(matches!(t.column("loss"), Err(Error::Schema(m)) if m.contains("`loss`")));
    }

    #[test]
    fn samples_roundtrip() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.0, 1e-300, 3.0, 0.0, 7.25]);
        let t = Table::parse(&matrix_to_csv(&m)).unwrap();
        assert_eq!(t.matrix("x").unwrap(), m);
    }

    #[test]
    fn rejects_text_fields() {
        assert!(Table::parse("a,b\n1,x\n").is_err());
    }
}
