//! Tabular numeric data with named columns, read from and written to CSV.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A rectangular table of `f64` with one name per column. Missing cells are
/// stored as NaN and rejected downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<String>,
    values: DMatrix<f64>,
}

impl Dataset {
    pub fn new(columns: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if columns.len() != values.ncols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} columns",
                columns.len(),
                values.ncols()
            )));
        }
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(Error::Data(format!("duplicate column `{c}`")));
            }
        }
        Ok(Dataset { columns, values })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.column_index(name)
            .map(|j| self.values.column(j).iter().copied().collect())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut flat = Vec::new();
        let mut nrows = 0;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(Error::Data(format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    rec.len(),
                    columns.len()
                )));
            }
            for (field, name) in rec.iter().zip(&columns) {
                flat.push(parse_cell(field).ok_or_else(|| {
                    Error::Data(format!(
                        "row {}, column `{name}`: cannot parse `{field}`",
                        row + 1
                    ))
                })?);
            }
            nrows += 1;
        }
        let values = DMatrix::from_row_slice(nrows, columns.len(), &flat);
        Dataset::new(columns, values)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = fs::File::open(path.as_ref())
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.as_ref().display())))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.columns)?;
        for i in 0..self.values.nrows() {
            w.write_record(self.values.row(i).iter().map(|v| format_value(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(path, &buf)
    }
}

fn parse_cell(field: &str) -> Option<f64> {
    match field {
        "" | "NA" | "na" | "NaN" | "nan" | "." => Some(f64::NAN),
        s => s.parse().ok(),
    }
}

/// Shortest representation that round-trips exactly.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NA".to_owned()
    } else {
        format!("{v:?}")
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
