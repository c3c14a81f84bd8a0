//! Column-labelled numeric tables read from CSV.

use std::io::{Read, Write};
use std::path::Path;

use miar::{DMatrix, DVector, Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("CSV: {e}"))
}

/// A rectangular table of raw cells with a header row. Cells are parsed as
/// numbers only when a column is bound to a role.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Frame {
    pub fn read_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(f)
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let headers: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if headers.is_empty() {
            return Err(Error::InvalidInput("CSV has no columns".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = headers.iter().find(|h| !seen.insert(h.as_str())) {
            return Err(Error::InvalidInput(format!("duplicate column '{dup}'")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(Error::InvalidInput("CSV has no data rows".into()));
        }
        Ok(Frame { headers, rows })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("no column named '{name}'")))
    }

    /// Expand a role binding: comma separated names, where `prefix*`
    /// selects every column starting with `prefix`, in file order.
    pub fn resolve(&self, spec: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if let Some(prefix) = part.strip_suffix('*') {
                let hits: Vec<_> = self.headers.iter().filter(|h| h.starts_with(prefix)).cloned().collect();
                if hits.is_empty() {
                    return Err(Error::InvalidInput(format!("no column matches '{part}'")));
                }
                out.extend(hits);
            } else {
                self.index(part)?;
                out.push(part.to_string());
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidInput(format!("empty column list '{spec}'")));
        }
        Ok(out)
    }

    /// Raw cells of one column.
    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        let j = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[j].clone()).collect())
    }

    pub fn numeric(&self, name: &str) -> Result<DVector<f64>> {
        let j = self.index(name)?;
        let mut v = DVector::zeros(self.nrows());
        for (i, r) in self.rows.iter().enumerate() {
            let cell = &r[j];
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(Error::InvalidInput(format!("missing value in column '{name}', row {}", i + 1)));
            }
            v[i] = cell
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::InvalidInput(format!("column '{name}', row {}: '{cell}' is not a finite number", i + 1)))?;
        }
        Ok(v)
    }

    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.nrows(), names.len());
        for (j, name) in names.iter().enumerate() {
            m.set_column(j, &self.numeric(name)?);
        }
        Ok(m)
    }
}

/// Write a labelled matrix as CSV. Numbers use the shortest representation
/// that parses back to the same value.
pub fn write_matrix<W: Write>(w: W, headers: &[String], m: &DMatrix<f64>) -> Result<()> {
    if headers.len() != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{} headers for {} columns", headers.len(), m.ncols())));
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(headers).map_err(csv_err)?;
    for row in m.row_iter() {
        wr.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::InvalidInput(format!("CSV: {e}")))
}
