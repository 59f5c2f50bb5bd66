use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// `n` samples of a `d`-dimensional continuous random variable, row-major.
///
/// For layer outputs the rows are channels and the columns the flattened
/// per-channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl SampleMatrix {
    pub fn new(data: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSamples(format!("need n >= 2 samples, got {n}")));
        }
        if d < 1 {
            return Err(Error::InvalidSamples("need dimension d >= 1".into()));
        }
        if data.len() != n * d {
            return Err(Error::InvalidSamples(format!(
                "buffer holds {} values, expected n*d = {}",
                data.len(),
                n * d
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSamples(format!(
                "non-finite entry at sample {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { data, n, d })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::InvalidSamples(format!(
                    "row {i} has {} columns, expected {d}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(data, rows.len(), d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Applies `f` to every entry, revalidating the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.data.iter().map(|&v| f(v)).collect(), self.n, self.d)
    }

    /// Reads one sample per row, `d` comma-separated columns, no header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let row = record
                .iter()
                .enumerate()
                .map(|(col, field)| {
                    field.parse::<f64>().map_err(|_| {
                        Error::InvalidSamples(format!(
                            "row {}, column {}: cannot parse {field:?} as a number",
                            line + 1,
                            col + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    /// Writes the matrix in the same headerless format `from_csv_reader` accepts.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for i in 0..self.n {
            wtr.write_record(self.row(i).iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_shapes() {
        assert!(SampleMatrix::new(vec![1.0], 1, 1).is_err());
        assert!(SampleMatrix::new(vec![], 2, 0).is_err());
        assert!(SampleMatrix::new(vec![1.0, 2.0, 3.0], 2, 2).is_err());
        assert!(SampleMatrix::new(vec![1.0, f64::NAN], 2, 1).is_err());
        assert!(SampleMatrix::new(vec![1.0, f64::INFINITY], 2, 1).is_err());
        assert!(SampleMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let m = SampleMatrix::from_rows(&[vec![0.1, -2.5e-7], vec![3.0, 1e300], vec![0.0, 7.25]])
            .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = SampleMatrix::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn malformed_csv_is_reported() {
        let err = SampleMatrix::from_csv_reader("1,2\n3,x\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(SampleMatrix::from_csv_reader("1,2\n3\n".as_bytes()).is_err());
        assert!(SampleMatrix::from_csv_reader("5\n".as_bytes()).is_err());
    }
}
