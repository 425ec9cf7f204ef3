//! Dataset files.
//!
//! CSV: a header row, one label column chosen by name, every other column
//! a feature parsed as f64.
//!
//! Binary (little-endian): 16-byte header `magic[8] | M: u32 | D: u32`,
//! then the `M x D` feature matrix column by column, then the `M` labels.

use std::io::{Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const BINARY_MAGIC: [u8; 8] = *b"TDCDF64\0";

pub fn read_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Dataset(format!("no column named {label_column:?} in {}", path.display())))?;
    let d = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Dataset(format!("row {} has {} fields, expected {}", line + 1, record.len(), headers.len())));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("row {}: cannot parse {field:?} as a number", line + 1)))?;
            if c == label_idx {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let m = labels.len();
    Dataset::new(Matrix::from_vec(m, d, features)?, labels)
}

pub fn write_csv(path: &Path, dataset: &Dataset, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.num_features()).map(|c| format!("x{c}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for (i, y) in dataset.labels.iter().enumerate() {
        let mut rec: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{y:?}"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary(path: &Path, dataset: &Dataset) -> Result<()> {
    let (m, d) = (dataset.num_samples(), dataset.num_features());
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Dataset(format!("{v} does not fit the binary header")));
    let mut buf = Vec::with_capacity(16 + 8 * m * (d + 1));
    buf.extend_from_slice(&BINARY_MAGIC);
    buf.extend_from_slice(&to_u32(m)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(d)?.to_le_bytes());
    for c in 0..d {
        for r in 0..m {
            buf.extend_from_slice(&dataset.features.get(r, c).to_le_bytes());
        }
    }
    for y in &dataset.labels {
        buf.extend_from_slice(&y.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || buf[..8] != BINARY_MAGIC {
        return Err(Error::Dataset(format!("{} is not a binary dataset", path.display())));
    }
    let m = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 8 * m * (d + 1);
    if buf.len() != expected {
        return Err(Error::Dataset(format!("expected {expected} bytes for M={m}, D={d}, found {}", buf.len())));
    }
    let mut vals = buf[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut features = Matrix::zeros(m, d);
    for c in 0..d {
        for r in 0..m {
            features.set(r, c, vals.next().unwrap());
        }
    }
    let labels: Vec<f64> = vals.collect();
    Dataset::new(features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let x = Matrix::from_rows(&[&[1.0, -2.5, 0.1], &[3.25, 4.0, 1e-9]]);
        Dataset::new(x, vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&p, &sample(), "y").unwrap();
        assert_eq!(read_csv(&p, "y").unwrap(), sample());
    }

    #[test]
    fn csv_label_anywhere() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,target,b\n1,0,2\n3,1,4\n").unwrap();
        let ds = read_csv(&p, "target").unwrap();
        assert_eq!(ds.features.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds.labels, vec![0.0, 1.0]);
        assert!(read_csv(&p, "missing").is_err());
    }

    #[test]
    fn csv_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,y\n1,zero\n").unwrap();
        assert!(matches!(read_csv(&p, "y"), Err(Error::Dataset(_))));
    }

    #[test]
    fn binary_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_binary(&p, &sample()).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw.len(), 16 + 8 * 2 * 4);
        // column-major: second value is row 1 of column 0
        assert_eq!(f64::from_le_bytes(raw[24..32].try_into().unwrap()), 3.25);
        assert_eq!(read_binary(&p).unwrap(), sample());
    }

    #[test]
    fn binary_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_binary(&p, &sample()).unwrap();
        let mut raw = std::fs::read(&p).unwrap();
        raw.pop();
        std::fs::write(&p, raw).unwrap();
        assert!(read_binary(&p).is_err());
    }
}
