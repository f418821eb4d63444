//! Random-forest emotion classifier, impurity importance and attribute
//! selection.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emotion::EmotionQuadrant;
use crate::features::{AttributeVector, CorpusMatrix, FeatureCatalog, FeatureGroup};

const CLASSES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ForestError {
    #[error("labeled corpus needs at least 8 rows with one label each (rows {rows}, labels {labels})")]
    BadCorpus { rows: usize, labels: usize },
    #[error("corpus holds a single class")]
    DegenerateCorpus,
    #[error("catalog mismatch: forest uses {expected} ({expected_dim} dims), input has {found} ({found_dim} dims)")]
    CatalogMismatch { expected: String, expected_dim: usize, found: String, found_dim: usize },
    #[error("k = {k} exceeds catalog dimension {dim}")]
    KTooLarge { k: usize, dim: usize },
    #[error("unknown feature id {0}")]
    UnknownFeature(String),
}

#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub matrix: CorpusMatrix,
    pub labels: Vec<EmotionQuadrant>,
}

impl LabeledCorpus {
    pub fn new(matrix: CorpusMatrix, labels: Vec<EmotionQuadrant>) -> Result<Self, ForestError> {
        if matrix.rows() != labels.len() || labels.len() < 8 {
            return Err(ForestError::BadCorpus { rows: matrix.rows(), labels: labels.len() });
        }
        Ok(Self { matrix, labels })
    }

    /// Same as [`Self::new`] without the minimum row count.
    pub fn unchecked(matrix: CorpusMatrix, labels: Vec<EmotionQuadrant>) -> Self {
        assert_eq!(matrix.rows(), labels.len());
        Self { matrix, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows_of(&self, q: EmotionQuadrant) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == q).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self { matrix: self.matrix.select_rows(rows), labels: rows.iter().map(|&r| self.labels[r]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Defaults to floor(sqrt(D)).
    pub features_per_split: Option<usize>,
    pub seed: u64,
    /// Train trees on the rayon pool. Results do not depend on it.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 500, max_depth: None, min_samples_leaf: 1, features_per_split: None, seed: 0, parallel: false }
    }
}

/// Tree nodes as flat arrays; `feature[i] < 0` marks a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub counts: Vec<[u32; CLASSES]>,
    /// Weighted impurity decrease of each internal node (0 at leaves).
    pub gain: Vec<f64>,
    /// Canonical-order rows drawn by the bootstrap, with multiplicity.
    #[serde(default)]
    pub in_bag: Vec<u32>,
}

impl DecisionTree {
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut node = 0;
        while self.feature[node] >= 0 {
            let f = self.feature[node] as usize;
            node = if x[f] <= self.threshold[node] { self.left[node] } else { self.right[node] } as usize;
        }
        node
    }

    pub fn predict_row(&self, x: &[f64]) -> usize {
        argmax_counts(&self.counts[self.leaf_of(x)])
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub config: ForestConfig,
    pub catalog_version: String,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
    /// Position of every training row (input order) in the canonical order.
    canonical_position: Vec<u32>,
    train_labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub importance: Vec<f64>,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SelectionConfig {
    TopK { k: usize },
    RandomGrouped { n: usize, seed: u64 },
    Manual17,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self::TopK { k: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub catalog_version: String,
    pub method: SelectionConfig,
    pub indices: Vec<usize>,
}

/// Catalog ids behind [`SelectionConfig::Manual17`], after the twelve pitch
/// class bins.
pub const MANUAL_SCALARS: [&str; 5] =
    ["note_density_per_quarter", "onset_density_per_quarter", "mean_pitch", "mean_duration", "mean_velocity"];

fn argmax_counts(c: &[u32; CLASSES]) -> usize {
    let mut best = 0;
    for k in 1..CLASSES {
        if c[k] > c[best] {
            best = k;
        }
    }
    best
}

fn gini(c: &[u32; CLASSES], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = f64::from(n);
    1.0 - c.iter().map(|&k| (f64::from(k) / n).powi(2)).sum::<f64>()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

struct Builder<'a> {
    x: &'a [&'a [f64]],
    y: &'a [u8],
    mtry: usize,
    max_depth: usize,
    min_leaf: usize,
    tree: DecisionTree,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
    n_left: usize,
}

impl Builder<'_> {
    fn counts(&self, idx: &[u32]) -> [u32; CLASSES] {
        let mut c = [0u32; CLASSES];
        for &i in idx {
            c[self.y[i as usize] as usize] += 1;
        }
        c
    }

    fn push_node(&mut self, counts: [u32; CLASSES]) -> usize {
        let t = &mut self.tree;
        t.feature.push(-1);
        t.threshold.push(0.0);
        t.left.push(0);
        t.right.push(0);
        t.counts.push(counts);
        t.gain.push(0.0);
        t.feature.len() - 1
    }

    /// Best split on one feature, or None when the feature is constant over
    /// `idx` or no cut respects the leaf size.
    fn best_on(&self, f: usize, idx: &mut [u32], parent: &[u32; CLASSES]) -> Option<Split> {
        idx.sort_by(|&a, &b| self.x[a as usize][f].total_cmp(&self.x[b as usize][f]).then(a.cmp(&b)));
        let n = idx.len();
        let first = self.x[idx[0] as usize][f];
        let last = self.x[idx[n - 1] as usize][f];
        if first == last {
            return None;
        }
        let parent_imp = f64::from(n as u32) * gini(parent, n as u32);
        let mut left = [0u32; CLASSES];
        let mut best: Option<Split> = None;
        for i in 0..n - 1 {
            left[self.y[idx[i] as usize] as usize] += 1;
            let v = self.x[idx[i] as usize][f];
            let next = self.x[idx[i + 1] as usize][f];
            let nl = i + 1;
            if v == next || nl < self.min_leaf || n - nl < self.min_leaf {
                continue;
            }
            let mut right = *parent;
            for k in 0..CLASSES {
                right[k] -= left[k];
            }
            let nr = (n - nl) as u32;
            let child = f64::from(nl as u32) * gini(&left, nl as u32) + f64::from(nr) * gini(&right, nr);
            let gain = parent_imp - child;
            if best.as_ref().is_none_or(|b| gain > b.gain + 1e-12) {
                let mut threshold = v + (next - v) / 2.0;
                if threshold >= next {
                    threshold = v;
                }
                best = Some(Split { feature: f, threshold, gain, n_left: nl });
            }
        }
        best
    }

    fn build(&mut self, idx: &mut Vec<u32>, depth: usize, rng: &mut ChaCha8Rng, order: &mut [usize]) -> usize {
        let counts = self.counts(idx);
        let node = self.push_node(counts);
        let n = idx.len();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || n < 2 * self.min_leaf {
            return node;
        }
        // draw candidate features; keep drawing past mtry until one gives a valid split
        order.shuffle(rng);
        let mut best: Option<Split> = None;
        for (drawn, &f) in order.iter().enumerate() {
            if drawn >= self.mtry && best.is_some() {
                break;
            }
            if let Some(s) = self.best_on(f, idx, &counts) {
                let better = match &best {
                    None => true,
                    Some(b) => s.gain > b.gain + 1e-12 || ((s.gain - b.gain).abs() <= 1e-12 && s.feature < b.feature),
                };
                if better {
                    best = Some(s);
                }
            }
        }
        let Some(split) = best else { return node };
        let f = split.feature;
        idx.sort_by(|&a, &b| self.x[a as usize][f].total_cmp(&self.x[b as usize][f]).then(a.cmp(&b)));
        let mut right_idx = idx.split_off(split.n_left);
        self.tree.feature[node] = f as i32;
        self.tree.threshold[node] = split.threshold;
        self.tree.gain[node] = split.gain;
        let l = self.build(idx, depth + 1, rng, order);
        let r = self.build(&mut right_idx, depth + 1, rng, order);
        self.tree.left[node] = l as u32;
        self.tree.right[node] = r as u32;
        node
    }
}

/// Trains a forest. Rows are put in a canonical order (lexicographic by
/// values, then label) before bootstrapping, so a row permutation of the
/// corpus yields the same forest.
pub fn train_forest(corpus: &LabeledCorpus, config: &ForestConfig) -> Result<RandomForest, ForestError> {
    let m = &corpus.matrix;
    let n = m.rows();
    if n == 0 || n != corpus.labels.len() {
        return Err(ForestError::BadCorpus { rows: n, labels: corpus.labels.len() });
    }
    let first = corpus.labels[0];
    if corpus.labels.iter().all(|&l| l == first) {
        return Err(ForestError::DegenerateCorpus);
    }
    let d = m.cols();
    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&a, &b| lex_cmp(m.row(a), m.row(b)).then(corpus.labels[a].cmp(&corpus.labels[b])));
    let mut canonical_position = vec![0u32; n];
    for (p, &r) in canonical.iter().enumerate() {
        canonical_position[r] = p as u32;
    }
    let x: Vec<&[f64]> = canonical.iter().map(|&r| m.row(r)).collect();
    let y: Vec<u8> = canonical.iter().map(|&r| corpus.labels[r].index() as u8).collect();
    let mtry = config.features_per_split.unwrap_or_else(|| (d as f64).sqrt().floor() as usize).clamp(1, d);

    let grow = |t: usize| -> DecisionTree {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(t as u64);
        let mut idx: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
        idx.sort_unstable();
        let in_bag = idx.clone();
        let mut b = Builder {
            x: &x,
            y: &y,
            mtry,
            max_depth: config.max_depth.unwrap_or(usize::MAX),
            min_leaf: config.min_samples_leaf.max(1),
            tree: DecisionTree {
                feature: vec![],
                threshold: vec![],
                left: vec![],
                right: vec![],
                counts: vec![],
                gain: vec![],
                in_bag,
            },
        };
        let mut order: Vec<usize> = (0..d).collect();
        b.build(&mut idx, 0, &mut rng, &mut order);
        b.tree
    };
    let trees: Vec<DecisionTree> = if config.parallel {
        (0..config.n_trees).into_par_iter().map(grow).collect()
    } else {
        (0..config.n_trees).map(grow).collect()
    };
    Ok(RandomForest {
        config: *config,
        catalog_version: m.catalog_version.clone(),
        n_features: d,
        trees,
        canonical_position,
        train_labels: corpus.labels.iter().map(|l| l.index() as u8).collect(),
    })
}

impl RandomForest {
    pub fn votes(&self, x: &[f64]) -> [u32; CLASSES] {
        let mut v = [0u32; CLASSES];
        for t in &self.trees {
            v[t.predict_row(x)] += 1;
        }
        v
    }

    /// Majority vote; ties go to the lowest quadrant.
    pub fn predict_row(&self, x: &[f64]) -> EmotionQuadrant {
        EmotionQuadrant::from_index(argmax_counts(&self.votes(x))).expect("class index")
    }

    pub fn predict(&self, v: &AttributeVector) -> Result<EmotionQuadrant, ForestError> {
        if v.catalog_version != self.catalog_version || v.values.len() != self.n_features {
            return Err(ForestError::CatalogMismatch {
                expected: self.catalog_version.clone(),
                expected_dim: self.n_features,
                found: v.catalog_version.clone(),
                found_dim: v.values.len(),
            });
        }
        Ok(self.predict_row(&v.values))
    }

    pub fn predict_matrix(&self, m: &CorpusMatrix) -> Result<Vec<EmotionQuadrant>, ForestError> {
        if m.catalog_version != self.catalog_version || m.cols() != self.n_features {
            return Err(ForestError::CatalogMismatch {
                expected: self.catalog_version.clone(),
                expected_dim: self.n_features,
                found: m.catalog_version.clone(),
                found_dim: m.cols(),
            });
        }
        Ok((0..m.rows()).map(|r| self.predict_row(m.row(r))).collect())
    }

    /// Out-of-bag accuracy on the training corpus the forest was fit on
    /// (rows in their original order). Rows that are in-bag for every tree
    /// are skipped; returns None if all rows are.
    pub fn oob_accuracy(&self, corpus: &LabeledCorpus) -> Option<f64> {
        let mut hits = 0usize;
        let mut seen = 0usize;
        for r in 0..corpus.len() {
            let pos = *self.canonical_position.get(r)?;
            let mut v = [0u32; CLASSES];
            for t in &self.trees {
                if t.in_bag.binary_search(&pos).is_err() {
                    v[t.predict_row(corpus.matrix.row(r))] += 1;
                }
            }
            if v.iter().sum::<u32>() == 0 {
                continue;
            }
            seen += 1;
            if argmax_counts(&v) == usize::from(self.train_labels[r]) {
                hits += 1;
            }
        }
        (seen > 0).then(|| hits as f64 / seen as f64)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Mean decrease in Gini impurity: per tree, each split credits its feature
/// with (node samples / root samples) × impurity decrease; trees are averaged
/// and the result normalized to sum 1. A forest without a single split gets
/// uniform importance.
pub fn feature_importance(forest: &RandomForest) -> ImportanceRanking {
    let d = forest.n_features;
    let mut imp = vec![0.0; d];
    for t in &forest.trees {
        let root: u32 = t.counts.first().map_or(0, |c| c.iter().sum());
        if root == 0 {
            continue;
        }
        // stored gains are count-weighted, so dividing by root gives the
        // fraction-weighted impurity decrease
        for (node, &f) in t.feature.iter().enumerate() {
            if f >= 0 {
                imp[f as usize] += t.gain[node].max(0.0) / f64::from(root);
            }
        }
    }
    let total: f64 = imp.iter().sum();
    if total > 0.0 {
        imp.iter_mut().for_each(|v| *v /= total);
    } else if d > 0 {
        imp.iter_mut().for_each(|v| *v = 1.0 / d as f64);
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
    ImportanceRanking { importance: imp, order }
}

pub fn select_attributes(
    ranking: &ImportanceRanking,
    catalog: &FeatureCatalog,
    config: &SelectionConfig,
) -> Result<Selection, ForestError> {
    let d = catalog.total_dim();
    let indices = match *config {
        SelectionConfig::TopK { k } => {
            if k > d || k > ranking.order.len() {
                return Err(ForestError::KTooLarge { k, dim: d });
            }
            ranking.order[..k].to_vec()
        }
        SelectionConfig::RandomGrouped { n, seed } => {
            if n > d {
                return Err(ForestError::KTooLarge { k: n, dim: d });
            }
            random_grouped(catalog, n, seed)
        }
        SelectionConfig::Manual17 => manual17(catalog)?,
    };
    Ok(Selection { catalog_version: catalog.version.clone(), method: config.clone(), indices })
}

/// ceil(n/7) columns drawn per group; groups with fewer columns give all of
/// theirs and the shortfall is drawn from the remaining columns.
fn random_grouped(catalog: &FeatureCatalog, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = catalog.column_groups();
    let per_group = n.div_ceil(FeatureGroup::ALL.len());
    let mut chosen = Vec::with_capacity(n);
    for g in FeatureGroup::ALL {
        let mut cols: Vec<usize> = (0..groups.len()).filter(|&c| groups[c] == g).collect();
        cols.shuffle(&mut rng);
        chosen.extend(cols.into_iter().take(per_group));
    }
    chosen.truncate(n);
    if chosen.len() < n {
        let mut rest: Vec<usize> = (0..groups.len()).filter(|c| !chosen.contains(c)).collect();
        rest.shuffle(&mut rng);
        let missing = n - chosen.len();
        chosen.extend(rest.into_iter().take(missing));
    }
    chosen
}

fn manual17(catalog: &FeatureCatalog) -> Result<Vec<usize>, ForestError> {
    let pc = catalog
        .range_of("pitch_class_histogram")
        .ok_or_else(|| ForestError::UnknownFeature("pitch_class_histogram".into()))?;
    let mut out: Vec<usize> = pc.collect();
    for id in MANUAL_SCALARS {
        out.push(catalog.index_of(id).ok_or_else(|| ForestError::UnknownFeature(id.into()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn separable() -> LabeledCorpus {
        let rows = (0..8).map(|i| vec![i as f64 + if i < 4 { 0.0 } else { 6.0 }, ((i * 7) % 5) as f64, 3.0]).collect();
        let labels = (0..8).map(|i| if i < 4 { Q1 } else { Q3 }).collect();
        corpus(rows, labels)
    }

    fn small(n_trees: usize) -> ForestConfig {
        ForestConfig { n_trees, seed: 7, ..ForestConfig::default() }
    }

    #[test]
    fn separable_fixture_is_learned() {
        let c = separable();
        // a single threshold on feature 0 separates the classes
        assert!((0..8).all(|i| (c.matrix.get(i, 0) <= 6.0) == (c.labels[i] == Q1)));
        let f = train_forest(&c, &small(50)).unwrap();
        for i in 0..8 {
            assert_eq!(f.predict_row(c.matrix.row(i)), c.labels[i]);
        }
        let imp = feature_importance(&f);
        assert_eq!(imp.importance[2], 0.0);
        assert!((imp.importance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_predict_majority() {
        let c = corpus(vec![vec![1.0, 1.0]; 8], vec![Q2, Q2, Q2, Q2, Q2, Q4, Q4, Q1]);
        let f = train_forest(&c, &small(20)).unwrap();
        assert!(f.trees.iter().all(|t| t.node_count() == 1));
        assert_eq!(f.predict_row(&[1.0, 1.0]), Q2);
        let imp = feature_importance(&f);
        assert_eq!(imp.importance, vec![0.5, 0.5]);
    }

    #[test]
    fn single_class_is_degenerate() {
        let c = corpus(vec![vec![0.0]; 8], vec![Q1; 8]);
        assert!(matches!(train_forest(&c, &small(2)), Err(ForestError::DegenerateCorpus)));
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let c = separable();
        let a = train_forest(&c, &small(30)).unwrap();
        let b = train_forest(&c, &small(30)).unwrap();
        assert_eq!(a.trees, b.trees);
        let perm = [5, 2, 7, 0, 3, 6, 1, 4];
        let p = c.select_rows(&perm);
        let fp = train_forest(&p, &small(30)).unwrap();
        assert_eq!(a.trees, fp.trees);
        let par = train_forest(&c, &ForestConfig { parallel: true, ..small(30) }).unwrap();
        assert_eq!(a.trees, par.trees);
    }

    #[test]
    fn vote_ties_go_to_lowest_quadrant() {
        let leaf = |c: [u32; 4]| DecisionTree {
            feature: vec![-1],
            threshold: vec![0.0],
            left: vec![0],
            right: vec![0],
            counts: vec![c],
            gain: vec![0.0],
            in_bag: vec![],
        };
        let f = RandomForest {
            config: small(2),
            catalog_version: "test".into(),
            n_features: 1,
            trees: vec![leaf([0, 0, 3, 0]), leaf([2, 0, 0, 0])],
            canonical_position: vec![],
            train_labels: vec![],
        };
        assert_eq!(f.predict_row(&[0.0]), Q1);
        assert_eq!(argmax_counts(&[1, 0, 1, 0]), 0);
    }

    #[test]
    fn single_split_tree_routes_left() {
        let c = corpus(
            (0..8).map(|i| vec![if i < 4 { 0.0 } else { 1.0 }]).collect(),
            (0..8).map(|i| if i < 4 { Q4 } else { Q2 }).collect(),
        );
        let f = train_forest(&c, &small(1)).unwrap();
        let t = &f.trees[0];
        if t.node_count() == 3 {
            assert_eq!(t.threshold[0], 0.5);
            assert_eq!(f.predict_row(&[0.2]), Q4);
        }
    }

    #[test]
    fn oob_accuracy_on_separable_fixture() {
        let c = separable();
        let f = train_forest(&c, &small(200)).unwrap();
        let oob = f.oob_accuracy(&c).unwrap();
        assert!(oob >= 0.95, "oob {oob}");
    }

    #[test]
    fn json_round_trip() {
        let c = separable();
        let f = train_forest(&c, &small(5)).unwrap();
        assert_eq!(RandomForest::from_json(&f.to_json().unwrap()).unwrap(), f);
    }

    #[test]
    fn selection_methods() {
        let cat = FeatureCatalog::standard();
        let d = cat.total_dim();
        let importance: Vec<f64> = (0..d).map(|i| ((i * 37) % 101) as f64).collect();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
        let r = ImportanceRanking { importance, order: order.clone() };
        let all = select_attributes(&r, &cat, &SelectionConfig::TopK { k: d }).unwrap();
        assert_eq!(all.indices, order);
        assert!(matches!(
            select_attributes(&r, &cat, &SelectionConfig::TopK { k: d + 1 }),
            Err(ForestError::KTooLarge { .. })
        ));
        let m = select_attributes(&r, &cat, &SelectionConfig::Manual17).unwrap();
        assert_eq!(m.indices.len(), 17);
        let g = select_attributes(&r, &cat, &SelectionConfig::RandomGrouped { n: 100, seed: 3 }).unwrap();
        assert_eq!(g.indices.len(), 100);
        let uniq: std::collections::HashSet<_> = g.indices.iter().collect();
        assert_eq!(uniq.len(), 100);
        let groups = cat.column_groups();
        for grp in FeatureGroup::ALL {
            assert!(g.indices.iter().any(|&i| groups[i] == grp));
        }
        let g2 = select_attributes(&r, &cat, &SelectionConfig::RandomGrouped { n: 100, seed: 3 }).unwrap();
        assert_eq!(g, g2);
    }
}
