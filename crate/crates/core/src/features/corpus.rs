use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{extract_features, FeatureCatalog};
use crate::score::Score;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    Empty,
    #[error("catalog version mismatch: expected {expected}, found {found}")]
    CatalogMismatch { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad value {value:?} in row {row}, column {column}")]
    BadValue { row: usize, column: usize, value: String },
}

/// Row-major matrix of attribute vectors, one row per piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMatrix {
    pub catalog_version: String,
    pub row_ids: Vec<String>,
    pub column_ids: Vec<String>,
    /// Rows whose score had no notes.
    pub empty_rows: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BinaryManifest {
    catalog_version: String,
    rows: usize,
    cols: usize,
    row_ids: Vec<String>,
    column_ids: Vec<String>,
    empty_rows: Vec<usize>,
    encoding: String,
}

impl CorpusMatrix {
    pub fn new(
        catalog_version: impl Into<String>,
        row_ids: Vec<String>,
        column_ids: Vec<String>,
        data: Vec<f64>,
    ) -> Result<Self, CorpusError> {
        if data.len() != row_ids.len() * column_ids.len() {
            return Err(CorpusError::Shape(format!(
                "{} values for {}x{}",
                data.len(),
                row_ids.len(),
                column_ids.len()
            )));
        }
        Ok(Self { catalog_version: catalog_version.into(), row_ids, column_ids, empty_rows: vec![], data })
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.column_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    /// Rows restricted to `cols`, in that order.
    pub fn project(&self, cols: &[usize]) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| cols.iter().map(|&c| self.get(r, c)).collect()).collect()
    }

    /// Sub-matrix with the given rows, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let empty_rows =
            rows.iter().enumerate().filter(|(_, r)| self.empty_rows.contains(r)).map(|(i, _)| i).collect();
        Self {
            catalog_version: self.catalog_version.clone(),
            row_ids: rows.iter().map(|&r| self.row_ids[r].clone()).collect(),
            column_ids: self.column_ids.clone(),
            empty_rows,
            data,
        }
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.row_ids.iter().position(|r| r == id)
    }

    pub fn check_catalog(&self, catalog: &FeatureCatalog) -> Result<(), CorpusError> {
        if self.catalog_version != catalog.version || self.cols() != catalog.total_dim() {
            return Err(CorpusError::CatalogMismatch {
                expected: catalog.version.clone(),
                found: self.catalog_version.clone(),
            });
        }
        Ok(())
    }

    /// CSV with a `row_id` column followed by one column per feature
    /// dimension. The catalog version is not stored; see [`Self::read_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["row_id".to_string()];
        header.extend(self.column_ids.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.rows() {
            let mut rec = vec![self.row_ids[r].clone()];
            rec.extend(self.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, catalog_version: &str) -> Result<Self, CorpusError> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let column_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut row_ids = Vec::new();
        let mut data = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != column_ids.len() + 1 {
                return Err(CorpusError::Shape(format!("row {row} has {} fields", rec.len())));
            }
            row_ids.push(rec[0].to_string());
            for (column, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| CorpusError::BadValue { row, column, value: field.to_string() })?;
                data.push(v);
            }
        }
        Self::new(catalog_version, row_ids, column_ids, data)
    }

    /// Little-endian f64 blob at `path` plus `<path>.json` manifest.
    pub fn write_binary(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
        let manifest = BinaryManifest {
            catalog_version: self.catalog_version.clone(),
            rows: self.rows(),
            cols: self.cols(),
            row_ids: self.row_ids.clone(),
            column_ids: self.column_ids.clone(),
            empty_rows: self.empty_rows.clone(),
            encoding: "f64-le-row-major".into(),
        };
        fs::write(sidecar(path), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self, CorpusError> {
        let manifest: BinaryManifest = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != manifest.rows * manifest.cols * 8 {
            return Err(CorpusError::Shape(format!(
                "{} bytes for {}x{}",
                bytes.len(),
                manifest.rows,
                manifest.cols
            )));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut m = Self::new(manifest.catalog_version, manifest.row_ids, manifest.column_ids, data)?;
        m.empty_rows = manifest.empty_rows;
        Ok(m)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Extracts every score; row order follows `scores` whatever the worker
/// count.
pub fn extract_corpus(
    scores: &[(String, Score)],
    catalog: &FeatureCatalog,
) -> Result<CorpusMatrix, CorpusError> {
    if scores.is_empty() {
        return Err(CorpusError::Empty);
    }
    let vectors: Vec<_> = scores.par_iter().map(|(_, s)| extract_features(s, catalog)).collect();
    let mut data = Vec::with_capacity(scores.len() * catalog.total_dim());
    let mut empty_rows = Vec::new();
    for (i, v) in vectors.into_iter().enumerate() {
        if v.empty_score {
            log::warn!("score {} has no notes", scores[i].0);
            empty_rows.push(i);
        }
        data.extend(v.values);
    }
    let mut m = CorpusMatrix::new(
        catalog.version.clone(),
        scores.iter().map(|(id, _)| id.clone()).collect(),
        catalog.column_ids(),
        data,
    )?;
    m.empty_rows = empty_rows;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::Note;

    fn piece(shift: u8) -> Score {
        let notes = (0..6)
            .map(|i| Note { onset: i * 240, duration: 240 + 120 * (i % 2), pitch: 60 + shift + i as u8, velocity: 50 + 5 * i as u8, track: 0 })
            .collect();
        Score::new(notes, 480, vec![], vec![])
    }

    #[test]
    fn single_row_equals_single_extraction() {
        let cat = FeatureCatalog::standard();
        let m = extract_corpus(&[("a".into(), piece(0))], &cat).unwrap();
        assert_eq!(m.rows(), 1);
        assert_eq!(m.row(0), extract_features(&piece(0), &cat).values.as_slice());
    }

    #[test]
    fn permutation_permutes_rows() {
        let cat = FeatureCatalog::standard();
        let a = extract_corpus(&[("a".into(), piece(0)), ("b".into(), piece(3))], &cat).unwrap();
        let b = extract_corpus(&[("b".into(), piece(3)), ("a".into(), piece(0))], &cat).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let cat = FeatureCatalog::standard();
        let m = extract_corpus(&[("a".into(), piece(0)), ("b".into(), piece(5))], &cat).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("m.csv");
        m.write_csv(&csv_path).unwrap();
        assert_eq!(CorpusMatrix::read_csv(&csv_path, &cat.version).unwrap(), m);
        let bin = dir.path().join("m.bin");
        m.write_binary(&bin).unwrap();
        assert_eq!(CorpusMatrix::read_binary(&bin).unwrap(), m);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(extract_corpus(&[], &FeatureCatalog::standard()), Err(CorpusError::Empty)));
    }
}
