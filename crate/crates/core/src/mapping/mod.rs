//! Emotion-to-attribute mapping by supervised clustering over a labeled
//! corpus, plus the median binarization used to condition the generator.

mod kmeans;

pub use kmeans::{kmeans, KMeansConfig, KMeansResult};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::emotion::EmotionQuadrant;
use crate::forest::LabeledCorpus;

#[derive(Debug, thiserror::Error)]
pub enum MappingError {
    #[error("quadrant {0} has no samples")]
    EmptyQuadrant(EmotionQuadrant),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no rows")]
    NoRows,
    #[error("catalog mismatch: expected {expected}, found {found}")]
    CatalogMismatch { expected: String, found: String },
    #[error("quadrant {0} is missing from the mapping table")]
    MissingQuadrant(EmotionQuadrant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingMethod {
    #[default]
    Closest,
    Center,
    KMeans { k_clusters: usize, seed: u64 },
}


impl MappingMethod {
    pub fn kmeans_default() -> Self {
        Self::KMeans { k_clusters: 4, seed: 0 }
    }
}

/// Per-dimension z-scoring; constant dimensions keep std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, MappingError> {
        let first = rows.first().ok_or(MappingError::NoRows)?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingTable {
    pub catalog_version: String,
    pub indices: Vec<usize>,
    pub method: MappingMethod,
    /// Raw-space attribute values over `indices`; at least one per quadrant.
    pub vectors: BTreeMap<EmotionQuadrant, Vec<Vec<f64>>>,
}

impl MappingTable {
    /// First vector mapped to `q`.
    pub fn primary(&self, q: EmotionQuadrant) -> Result<&[f64], MappingError> {
        self.vectors.get(&q).and_then(|v| v.first()).map(Vec::as_slice).ok_or(MappingError::MissingQuadrant(q))
    }

    pub fn candidates(&self, q: EmotionQuadrant) -> &[Vec<f64>] {
        self.vectors.get(&q).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitVector {
    pub bits: Vec<u8>,
}

impl BitVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn column_mean(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

/// Standardized rows of the corpus restricted to `indices`, with the
/// standardizer fit on the whole corpus.
pub fn standardized(corpus: &LabeledCorpus, indices: &[usize]) -> Result<(Standardizer, Vec<Vec<f64>>), MappingError> {
    let raw = corpus.matrix.project(indices);
    let st = Standardizer::fit(&raw)?;
    let z = raw.iter().map(|r| st.transform(r)).collect();
    Ok((st, z))
}

pub fn compute_mapping(
    corpus: &LabeledCorpus,
    indices: &[usize],
    method: MappingMethod,
) -> Result<MappingTable, MappingError> {
    let raw = corpus.matrix.project(indices);
    let st = Standardizer::fit(&raw)?;
    let z: Vec<Vec<f64>> = raw.iter().map(|r| st.transform(r)).collect();
    let mut vectors = BTreeMap::new();
    for q in EmotionQuadrant::ALL {
        let rows = corpus.rows_of(q);
        if rows.is_empty() {
            return Err(MappingError::EmptyQuadrant(q));
        }
        let v = match method {
            MappingMethod::Closest => {
                let zq: Vec<&[f64]> = rows.iter().map(|&r| z[r].as_slice()).collect();
                let center = column_mean(&zq);
                raw[closest_row(&rows, &z, &center)].clone()
            }
            MappingMethod::Center => {
                let rq: Vec<&[f64]> = rows.iter().map(|&r| raw[r].as_slice()).collect();
                column_mean(&rq)
            }
            MappingMethod::KMeans { k_clusters, seed } => {
                let pts: Vec<Vec<f64>> = rows.iter().map(|&r| z[r].clone()).collect();
                let cfg = KMeansConfig { k: k_clusters, seed: seed ^ q.index() as u64, ..KMeansConfig::default() };
                let res = kmeans(&pts, &cfg);
                st.inverse(&res.centroids[res.largest_cluster()])
            }
        };
        vectors.insert(q, vec![v]);
    }
    Ok(MappingTable { catalog_version: corpus.matrix.catalog_version.clone(), indices: indices.to_vec(), method, vectors })
}

/// Row (from `rows`) nearest to `center`; ties go to the lower row id.
fn closest_row(rows: &[usize], z: &[Vec<f64>], center: &[f64]) -> usize {
    let mut best = rows[0];
    let mut best_d = f64::INFINITY;
    for &r in rows {
        let d = sq_dist(&z[r], center);
        if d < best_d {
            best = r;
            best_d = d;
        }
    }
    best
}

/// Per-column median; an even count averages the two middle values.
pub fn compute_medians(rows: &[Vec<f64>]) -> Result<Vec<f64>, MappingError> {
    let first = rows.first().ok_or(MappingError::NoRows)?;
    Ok((0..first.len())
        .map(|j| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect())
}

/// bit j = 1 iff `v[j] > medians[j]`.
pub fn binarize(v: &[f64], medians: &[f64]) -> Result<BitVector, MappingError> {
    if v.len() != medians.len() {
        return Err(MappingError::LengthMismatch { left: v.len(), right: medians.len() });
    }
    Ok(BitVector { bits: v.iter().zip(medians).map(|(x, m)| u8::from(x > m)).collect() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenterBoundary {
    pub center: Vec<usize>,
    pub boundary: Vec<usize>,
}

/// Per quadrant, the `n` rows nearest to and the `n` rows farthest from the
/// quadrant mean in standardized space. Rows are ranked by (distance, row
/// id); quadrants with fewer than 2n rows give floor(m/2) to each side.
pub fn center_boundary_split(
    corpus: &LabeledCorpus,
    indices: &[usize],
    n: usize,
) -> Result<BTreeMap<EmotionQuadrant, CenterBoundary>, MappingError> {
    let (_, z) = standardized(corpus, indices)?;
    let mut out = BTreeMap::new();
    for q in EmotionQuadrant::ALL {
        let rows = corpus.rows_of(q);
        if rows.is_empty() {
            out.insert(q, CenterBoundary { center: vec![], boundary: vec![] });
            continue;
        }
        let zq: Vec<&[f64]> = rows.iter().map(|&r| z[r].as_slice()).collect();
        let center = column_mean(&zq);
        let dist: Vec<f64> = rows.iter().map(|&r| sq_dist(&z[r], &center)).collect();
        // distances equal up to rounding noise count as ties
        let scale = dist.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut ranked: Vec<(i64, usize)> =
            rows.iter().zip(&dist).map(|(&r, d)| ((d / scale * 1e9).round() as i64, r)).collect();
        ranked.sort_unstable();
        let take = n.min(ranked.len() / 2);
        let mut c: Vec<usize> = ranked[..take].iter().map(|x| x.1).collect();
        let mut b: Vec<usize> = ranked[ranked.len() - take..].iter().map(|x| x.1).collect();
        c.sort_unstable();
        b.sort_unstable();
        out.insert(q, CenterBoundary { center: c, boundary: b });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CorpusMatrix;
    use EmotionQuadrant::*;

    fn corpus(rows: Vec<Vec<f64>>, labels: Vec<EmotionQuadrant>) -> LabeledCorpus {
        let cols = rows[0].len();
        let m = CorpusMatrix::new(
            "test",
            (0..rows.len()).map(|i| format!("r{i}")).collect(),
            (0..cols).map(|c| format!("f{c}")).collect(),
            rows.concat(),
        )
        .unwrap();
        LabeledCorpus::unchecked(m, labels)
    }

    fn fixture() -> LabeledCorpus {
        corpus(
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![9.0, 5.0], vec![7.0, 3.0], vec![8.0, 8.0]],
            vec![Q1, Q1, Q1, Q2, Q3, Q4],
        )
    }

    #[test]
    fn closest_and_center_on_symmetric_fixture() {
        let c = fixture();
        let closest = compute_mapping(&c, &[0, 1], MappingMethod::Closest).unwrap();
        assert_eq!(closest.primary(Q1).unwrap(), &[1.0, 1.0]);
        let center = compute_mapping(&c, &[0, 1], MappingMethod::Center).unwrap();
        assert_eq!(center.primary(Q1).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn singleton_quadrant_maps_to_its_sample() {
        let c = fixture();
        for m in [MappingMethod::Closest, MappingMethod::Center, MappingMethod::kmeans_default()] {
            let t = compute_mapping(&c, &[0, 1], m).unwrap();
            let v = t.primary(Q2).unwrap();
            assert!((v[0] - 9.0).abs() < 1e-9 && (v[1] - 5.0).abs() < 1e-9, "{m:?}: {v:?}");
        }
    }

    #[test]
    fn empty_quadrant_is_an_error() {
        let c = corpus(vec![vec![0.0], vec![1.0], vec![2.0]], vec![Q1, Q2, Q3]);
        assert!(matches!(compute_mapping(&c, &[0], MappingMethod::Closest), Err(MappingError::EmptyQuadrant(Q4))));
    }

    #[test]
    fn medians_and_binarize() {
        let col = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
        assert_eq!(compute_medians(&col(&[5.0, 1.0, 3.0, 2.0, 4.0])).unwrap(), vec![3.0]);
        assert_eq!(compute_medians(&col(&[1.0, 2.0, 3.0, 4.0])).unwrap(), vec![2.5]);
        assert_eq!(compute_medians(&col(&[7.0, 7.0, 7.0])).unwrap(), vec![7.0]);
        assert_eq!(binarize(&[4.0, 5.0], &[3.0, 5.0]).unwrap().bits, vec![1, 0]);
        assert_eq!(binarize(&[3.0, 5.0], &[3.0, 5.0]).unwrap().bits, vec![0, 0]);
        assert!(binarize(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn center_boundary_on_a_line() {
        let rows: Vec<Vec<f64>> =
            (0..5).map(|i| vec![i as f64]).chain((0..4).map(|i| vec![i as f64 * 10.0])).collect();
        let labels = vec![Q1, Q1, Q1, Q1, Q1, Q2, Q3, Q4, Q4];
        let split = center_boundary_split(&corpus(rows, labels), &[0], 2).unwrap();
        assert_eq!(split[&Q1].center, vec![1, 2]);
        assert_eq!(split[&Q1].boundary, vec![0, 4]);
        // single-row quadrant gives nothing to either side
        assert!(split[&Q2].center.is_empty());
    }

    #[test]
    fn identical_points_split_by_id() {
        let rows = vec![vec![1.0]; 8];
        let labels = vec![Q1, Q1, Q1, Q1, Q2, Q2, Q3, Q4];
        let split = center_boundary_split(&corpus(rows, labels), &[0], 2).unwrap();
        assert_eq!(split[&Q1].center, vec![0, 1]);
        assert_eq!(split[&Q1].boundary, vec![2, 3]);
    }

    #[test]
    fn standardizer_keeps_constant_dims() {
        let st = Standardizer::fit(&[vec![1.0, 2.0], vec![1.0, 4.0]]).unwrap();
        assert_eq!(st.std, vec![1.0, 1.0]);
        assert_eq!(st.transform(&[1.0, 4.0]), vec![0.0, 1.0]);
        assert_eq!(st.inverse(&[0.0, 1.0]), vec![1.0, 4.0]);
    }
}
