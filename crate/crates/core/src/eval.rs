//! Objective evaluation, center/boundary bias analysis, pairwise L1 distance
//! analysis and a 2-D PCA projection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::emotion::EmotionQuadrant;
use crate::features::{extract_features, FeatureCatalog};
use crate::forest::{ForestError, LabeledCorpus, RandomForest};
use crate::mapping::{binarize, center_boundary_split, MappingError, Standardizer};
use crate::model::{generate_from_bits, ModelError, ModelState, SamplerConfig, TransformerClassifier};
use crate::score::{score_to_tokens, tokens_to_score, QuantizationConfig, Score, TokenSequence};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Input(String),
}

/// Backend that labels scores with an emotion quadrant.
pub enum ObjectiveClassifier<'a> {
    Forest { forest: &'a RandomForest, catalog: &'a FeatureCatalog },
    Transformer { model: &'a TransformerClassifier, grid: QuantizationConfig },
}

impl ObjectiveClassifier<'_> {
    pub fn classify(&self, score: &Score) -> Result<EmotionQuadrant, EvalError> {
        match self {
            Self::Forest { forest, catalog } => Ok(forest.predict(&extract_features(score, catalog))?),
            Self::Transformer { model, grid } => Ok(model.predict(&score_to_tokens(score, grid))?),
        }
    }
}

/// Fraction of positions where `predicted == intended`.
pub fn accuracy(predicted: &[EmotionQuadrant], intended: &[EmotionQuadrant]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(intended).filter(|(a, b)| a == b).count();
    hits as f64 / predicted.len() as f64
}

pub fn objective_accuracy(
    scores: &[Score],
    intended: &[EmotionQuadrant],
    clf: &ObjectiveClassifier<'_>,
) -> Result<f64, EvalError> {
    if scores.is_empty() || scores.len() != intended.len() {
        return Err(EvalError::Input(format!("{} scores for {} labels", scores.len(), intended.len())));
    }
    let predicted = scores.iter().map(|s| clf.classify(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(accuracy(&predicted, intended))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Mean L1 over same-label pairs of each quadrant with at least 2 samples.
    pub intra_by_quadrant: BTreeMap<EmotionQuadrant, f64>,
    /// Mean over all same-label pairs.
    pub intra_mean: f64,
    /// Mean over all different-label pairs.
    pub inter_mean: f64,
    pub gap: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    /// Sorted pairwise distances.
    pub intra_curve: Vec<f64>,
    pub inter_curve: Vec<f64>,
    /// Quadrants present with a single sample.
    pub singleton_classes: Vec<EmotionQuadrant>,
}

impl DistanceReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("kind,rank,distance\n");
        for (i, d) in self.intra_curve.iter().enumerate() {
            s.push_str(&format!("intra,{i},{d}\n"));
        }
        for (i, d) in self.inter_curve.iter().enumerate() {
            s.push_str(&format!("inter,{i},{d}\n"));
        }
        s
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// All unordered pairs: same-label pairs are intra, the rest inter.
/// Classes with one sample contribute no intra pair and are reported.
pub fn l1_distance_analysis(vectors: &[Vec<f64>], labels: &[EmotionQuadrant]) -> Result<DistanceReport, EvalError> {
    if vectors.len() != labels.len() || vectors.len() < 2 {
        return Err(EvalError::Input(format!("{} vectors for {} labels", vectors.len(), labels.len())));
    }
    let mut by_q: BTreeMap<EmotionQuadrant, (f64, usize)> = BTreeMap::new();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = l1(&vectors[i], &vectors[j]);
            if labels[i] == labels[j] {
                let e = by_q.entry(labels[i]).or_default();
                e.0 += d;
                e.1 += 1;
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    let mut counts: BTreeMap<EmotionQuadrant, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let singleton_classes: Vec<_> = counts.iter().filter(|(_, &c)| c == 1).map(|(&q, _)| q).collect();
    for q in &singleton_classes {
        log::warn!("quadrant {q} has a single sample; no intra-class pair");
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let intra_mean = mean(&intra);
    let inter_mean = mean(&inter);
    intra.sort_by(f64::total_cmp);
    inter.sort_by(f64::total_cmp);
    Ok(DistanceReport {
        intra_by_quadrant: by_q.into_iter().map(|(q, (s, n))| (q, s / n as f64)).collect(),
        intra_mean,
        inter_mean,
        gap: inter_mean - intra_mean,
        intra_pairs: intra.len(),
        inter_pairs: inter.len(),
        intra_curve: intra,
        inter_curve: inter,
        singleton_classes,
    })
}

/// Z-scores `vectors` with `standardizer` and runs [`l1_distance_analysis`].
pub fn standardized_distance_analysis(
    vectors: &[Vec<f64>],
    labels: &[EmotionQuadrant],
    standardizer: &Standardizer,
) -> Result<DistanceReport, EvalError> {
    let z: Vec<Vec<f64>> = vectors.iter().map(|v| standardizer.transform(v)).collect();
    l1_distance_analysis(&z, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAccuracy {
    pub accuracy: f64,
    pub count: usize,
    pub by_quadrant: BTreeMap<EmotionQuadrant, f64>,
}

fn set_accuracy(pred: &[EmotionQuadrant], truth: &[EmotionQuadrant]) -> SetAccuracy {
    let mut by_quadrant = BTreeMap::new();
    for q in EmotionQuadrant::ALL {
        let (p, t): (Vec<_>, Vec<_>) = pred.iter().zip(truth).filter(|(_, &t)| t == q).unzip();
        if !t.is_empty() {
            by_quadrant.insert(q, accuracy(&p, &t));
        }
    }
    SetAccuracy { accuracy: accuracy(pred, truth), count: pred.len(), by_quadrant }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub n_per_quadrant: usize,
    pub real_center: SetAccuracy,
    pub real_boundary: SetAccuracy,
    /// None when no generator was supplied.
    pub generated_center: Option<SetAccuracy>,
    pub generated_boundary: Option<SetAccuracy>,
    pub center_ids: Vec<String>,
    pub boundary_ids: Vec<String>,
}

pub struct Generator<'a> {
    pub model: &'a ModelState,
    pub medians: &'a [f64],
    pub sampler: SamplerConfig,
    pub grid: QuantizationConfig,
    /// Pieces generated per conditioning sample.
    pub per_sample: usize,
}

/// Classifies center and boundary samples of `corpus` directly and, with a
/// generator, music generated from their attribute values. The corpus
/// matrix must use the forest's full catalog; `indices` are the selected
/// dims used for the split and for conditioning.
pub fn bias_experiment(
    corpus: &LabeledCorpus,
    indices: &[usize],
    n: usize,
    forest: &RandomForest,
    catalog: &FeatureCatalog,
    generator: Option<&Generator<'_>>,
) -> Result<BiasReport, EvalError> {
    let split = center_boundary_split(corpus, indices, n)?;
    let center: Vec<usize> = split.values().flat_map(|s| s.center.iter().copied()).collect();
    let boundary: Vec<usize> = split.values().flat_map(|s| s.boundary.iter().copied()).collect();
    let real = |rows: &[usize]| -> SetAccuracy {
        let pred: Vec<_> = rows.iter().map(|&r| forest.predict_row(corpus.matrix.row(r))).collect();
        let truth: Vec<_> = rows.iter().map(|&r| corpus.labels[r]).collect();
        set_accuracy(&pred, &truth)
    };
    let generated = |g: &Generator<'_>, rows: &[usize]| -> Result<SetAccuracy, EvalError> {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (k, &r) in rows.iter().enumerate() {
            let values: Vec<f64> = indices.iter().map(|&c| corpus.matrix.get(r, c)).collect();
            let bits = binarize(&values, g.medians)?;
            for rep in 0..g.per_sample.max(1) {
                let cfg = SamplerConfig { seed: g.sampler.seed.wrapping_add((k * 1000 + rep) as u64), ..g.sampler };
                let seq = generate_from_bits(g.model, &bits, &cfg)?;
                let score = decode(&seq, &g.grid);
                pred.push(forest.predict(&extract_features(&score, catalog))?);
                truth.push(corpus.labels[r]);
            }
        }
        Ok(set_accuracy(&pred, &truth))
    };
    let (gc, gb) = match generator {
        Some(g) => (Some(generated(g, &center)?), Some(generated(g, &boundary)?)),
        None => (None, None),
    };
    Ok(BiasReport {
        n_per_quadrant: n,
        real_center: real(&center),
        real_boundary: real(&boundary),
        generated_center: gc,
        generated_boundary: gb,
        center_ids: center.iter().map(|&r| corpus.matrix.row_ids[r].clone()).collect(),
        boundary_ids: boundary.iter().map(|&r| corpus.matrix.row_ids[r].clone()).collect(),
    })
}

/// Detokenizes a generated sequence; an unusable sequence gives an empty
/// score.
pub fn decode(seq: &TokenSequence, grid: &QuantizationConfig) -> Score {
    tokens_to_score(seq, grid)
        .map(|d| d.score)
        .unwrap_or_else(|_| Score::new(vec![], grid.ticks_per_quarter, vec![], vec![]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each component.
    pub variance: [f64; 2],
    /// Component loadings over the z-scored input dims.
    pub components: [Vec<f64>; 2],
}

impl Projection {
    pub fn to_csv(&self, ids: &[String], labels: &[EmotionQuadrant]) -> String {
        let mut s = String::from("id,label,pc1,pc2\n");
        for (i, c) in self.coords.iter().enumerate() {
            let id = ids.get(i).map_or("", String::as_str);
            let label = labels.get(i).map_or(String::new(), |l| l.to_string());
            s.push_str(&format!("{id},{label},{},{}\n", c[0], c[1]));
        }
        s
    }
}

/// Projects z-scored vectors onto the two leading principal components of
/// their covariance. Each component's largest-magnitude loading is made
/// positive.
pub fn pca_project(vectors: &[Vec<f64>]) -> Result<Projection, EvalError> {
    if vectors.len() < 3 {
        return Err(EvalError::Input("projection needs at least 3 vectors".into()));
    }
    let st = Standardizer::fit(vectors)?;
    let n = vectors.len();
    let d = vectors[0].len();
    let z = DMatrix::from_fn(n, d, |i, j| (vectors[i][j] - st.mean[j]) / st.std[j]);
    let cov = z.transpose() * &z / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut variance = [0.0; 2];
    for (k, comp) in comps.iter_mut().enumerate() {
        let Some(&c) = order.get(k) else { break };
        let col = eig.eigenvectors.column(c);
        let lead = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        *comp = col.iter().map(|v| v * sign).collect();
        variance[k] = eig.eigenvalues[c].max(0.0);
    }
    let coords = (0..n)
        .map(|i| {
            let row = z.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect();
    Ok(Projection { coords, variance, components: comps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionQuadrant::*;

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[Q1, Q3], &[Q1, Q2]), 0.5);
    }

    #[test]
    fn distance_hand_example() {
        let r = l1_distance_analysis(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![1.0, 1.0]], &[Q1, Q1, Q2]).unwrap();
        assert_eq!(r.intra_mean, 4.0);
        assert_eq!(r.inter_mean, 2.0);
        assert_eq!(r.intra_pairs, 1);
        assert_eq!(r.inter_pairs, 2);
        assert_eq!(r.singleton_classes, vec![Q2]);
        let same = l1_distance_analysis(&vec![vec![1.0, 2.0]; 4], &[Q1, Q1, Q2, Q2]).unwrap();
        assert_eq!((same.intra_mean, same.inter_mean), (0.0, 0.0));
    }

    #[test]
    fn pca_of_collinear_points() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = pca_project(&pts).unwrap();
        assert!(p.variance[1].abs() < 1e-9);
        let cx: f64 = p.coords.iter().map(|c| c[0]).sum();
        let cy: f64 = p.coords.iter().map(|c| c[1]).sum();
        assert!(cx.abs() < 1e-9 && cy.abs() < 1e-9);
        let lead = p.components[0].iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        assert!(lead > 0.0);
    }
}
