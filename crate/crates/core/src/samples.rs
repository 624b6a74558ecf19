//! Sample matrices with optional per-column standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};
use crate::map::validate_permutation;
use crate::scalar::Real;

/// Column means and scales removed by [`SampleSet::standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// `n` samples of `p` variables, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    n: usize,
    p: usize,
    data: Vec<T>,
    names: Vec<String>,
    standardization: Option<Standardization>,
}

impl<T: Real> SampleSet<T> {
    pub fn new(n: usize, p: usize, data: Vec<T>) -> Result<Self> {
        let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
        Self::with_names(n, p, data, names)
    }

    pub fn with_names(n: usize, p: usize, data: Vec<T>, names: Vec<String>) -> Result<Self> {
        if data.len() != n * p {
            return Err(SingError::InvalidInput(format!(
                "sample data has {} entries, expected {n} x {p}",
                data.len()
            )));
        }
        if names.len() != p {
            return Err(SingError::InvalidInput("one name per column required".into()));
        }
        if n < 2 {
            return Err(SingError::InvalidInput(format!("need at least 2 samples, got {n}")));
        }
        if p == 0 {
            return Err(SingError::InvalidInput("need at least one variable".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SingError::Parse {
                row: pos / p + 1,
                column: pos % p + 1,
                message: "non-finite value".into(),
            });
        }
        let set = Self {
            n,
            p,
            data,
            names,
            standardization: None,
        };
        for j in 0..p {
            let (_, var) = set.column_moments(j);
            if !(var > 0.0) {
                return Err(SingError::InvalidInput(format!("column {j} is constant")));
            }
        }
        Ok(set)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(SingError::InvalidInput("ragged sample rows".into()));
        }
        Self::new(n, p, rows.iter().flatten().copied().collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.p)
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    /// Mean and (n-1)-normalized variance, accumulated in `f64`.
    fn column_moments(&self, j: usize) -> (f64, f64) {
        let n = self.n as f64;
        let mean = self.rows().map(|r| r[j].to_f64_lossy()).sum::<f64>() / n;
        let var = self
            .rows()
            .map(|r| (r[j].to_f64_lossy() - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (mean, var)
    }

    /// Centers each column and scales it to unit sample variance. Already
    /// standardized sets are returned unchanged.
    pub fn standardize(&self) -> Self {
        if self.standardization.is_some() {
            return self.clone();
        }
        let (mean, scale): (Vec<f64>, Vec<f64>) =
            (0..self.p).map(|j| {
                let (m, v) = self.column_moments(j);
                (m, v.sqrt())
            }).unzip();
        let data = self
            .rows()
            .flat_map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, &v)| T::lit((v.to_f64_lossy() - mean[j]) / scale[j]))
                    .collect::<Vec<_>>()
            })
            .collect();
        Self {
            n: self.n,
            p: self.p,
            data,
            names: self.names.clone(),
            standardization: Some(Standardization { mean, scale }),
        }
    }

    /// Reorders columns: column `pos` of the result is column `perm[pos]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        validate_permutation(perm, self.p)?;
        let data = self
            .rows()
            .flat_map(|r| perm.iter().map(|&c| r[c]).collect::<Vec<_>>())
            .collect();
        let standardization = self.standardization.as_ref().map(|s| Standardization {
            mean: perm.iter().map(|&c| s.mean[c]).collect(),
            scale: perm.iter().map(|&c| s.scale[c]).collect(),
        });
        Ok(Self {
            n: self.n,
            p: self.p,
            data,
            names: perm.iter().map(|&c| self.names[c].clone()).collect(),
            standardization,
        })
    }

    /// Rows `idx` (with repetition) as a new set, keeping names and standardization record.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.len() < 2 {
            return Err(SingError::InvalidInput("need at least 2 rows".into()));
        }
        let data = idx.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        Ok(Self {
            n: idx.len(),
            p: self.p,
            data,
            names: self.names.clone(),
            standardization: self.standardization.clone(),
        })
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> SampleSet<U> {
        SampleSet {
            n: self.n,
            p: self.p,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            names: self.names.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

impl SampleSet<f64> {
    /// Reads a headered CSV: one column per variable, one row per sample.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_error(e, 0))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let p = names.len();
        let mut data = Vec::new();
        let mut n = 0;
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| csv_error(e, i + 1))?;
            if record.len() != p {
                return Err(SingError::Parse {
                    row: i + 1,
                    column: record.len().min(p) + 1,
                    message: format!("expected {p} fields, found {}", record.len()),
                });
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| SingError::Parse {
                    row: i + 1,
                    column: j + 1,
                    message: format!("'{field}' is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(SingError::Parse {
                        row: i + 1,
                        column: j + 1,
                        message: "non-finite value".into(),
                    });
                }
                data.push(v);
            }
            n += 1;
        }
        Self::with_names(n, p, data, names)
    }

    pub fn read_csv_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the header and rows; values use the shortest round-trip form.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names).map_err(csv_io)?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn csv_io(e: csv::Error) -> SingError {
    SingError::Io(std::io::Error::other(e))
}

fn csv_error(e: csv::Error, row: usize) -> SingError {
    if e.is_io_error() {
        return csv_io(e);
    }
    SingError::Parse {
        row,
        column: 0,
        message: e.to_string(),
    }
}
