//! Resumable end-to-end pipeline: extract, train-forest, select-attrs,
//! map-emotion, train, generate, evaluate.
//!
//! Each stage writes its artifacts under the artifact directory and records a
//! stamp (hash of its inputs and of its outputs) in `stamps.json`. A stage is
//! skipped when its stamp matches and its outputs are intact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{split_dataset, DatasetError, Manifest, ManifestEntry};
use crate::emotion::EmotionQuadrant;
use crate::eval::{
    accuracy, bias_experiment, decode, l1_distance_analysis, pca_project, BiasReport, DistanceReport, EvalError,
    Generator,
};
use crate::features::{extract_corpus, extract_features, CorpusError, CorpusMatrix, FeatureCatalog};
use crate::forest::{
    feature_importance, select_attributes, train_forest, ForestConfig, ForestError, LabeledCorpus, RandomForest,
    Selection, SelectionConfig,
};
use crate::mapping::{binarize, compute_mapping, compute_medians, MappingError, MappingMethod, MappingTable, Standardizer};
use crate::midi::write_midi;
use crate::model::{
    generate_from_bits, load_checkpoint, save_checkpoint, train, Checkpoint, ClassifierConfig, ModelConfig,
    ModelError, ModelState, SamplerConfig, TrainConfig, TransformerClassifier,
};
use crate::score::{quantize, score_to_midi, score_to_tokens, QuantizationConfig, Score, TokenSequence};

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("{0}")]
    Config(String),
}

impl StageError {
    /// True for failures caused by inputs rather than by the program.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            StageError::Model(ModelError::NonFiniteLoss { .. }) | StageError::Eval(EvalError::Model(ModelError::NonFiniteLoss { .. }))
        )
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: StageError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierBackend {
    Forest,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus_dir: PathBuf,
    /// Defaults to `<corpus_dir>/manifest.json`, or a scan of the directory
    /// when that file is absent.
    pub manifest: Option<PathBuf>,
    pub artifact_dir: PathBuf,
    pub catalog_version: String,
    pub split_ratios: [f64; 3],
    pub forest: ForestConfig,
    pub selection: SelectionConfig,
    pub mapping: MappingMethod,
    /// `desk`, `full` or `tiny`.
    pub model: String,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub classifier: ClassifierBackend,
    pub generate_per_quadrant: usize,
    /// Center/boundary samples per quadrant for the bias analysis.
    pub bias_n: usize,
    /// Pieces generated per conditioning sample in the bias analysis.
    pub bias_per_sample: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("corpus"),
            manifest: None,
            artifact_dir: PathBuf::from("artifacts"),
            catalog_version: crate::features::CATALOG_VERSION.to_string(),
            split_ratios: [0.8, 0.1, 0.1],
            forest: ForestConfig::default(),
            selection: SelectionConfig::default(),
            mapping: MappingMethod::default(),
            model: "desk".into(),
            train: TrainConfig::desk(),
            sampler: SamplerConfig::default(),
            classifier: ClassifierBackend::Forest,
            generate_per_quadrant: 25,
            bias_n: 5,
            bias_per_sample: 2,
            seed: 0,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, StageError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Copy with every stage seed derived from the global one and parallelism
    /// switched on when more than one worker is configured.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.forest.seed = s;
        c.train.seed = s.wrapping_add(1);
        c.sampler.seed = s.wrapping_add(2);
        if let MappingMethod::KMeans { seed, .. } = &mut c.mapping {
            *seed = s.wrapping_add(3);
        }
        if let SelectionConfig::RandomGrouped { seed, .. } = &mut c.selection {
            *seed = s.wrapping_add(4);
        }
        c.forest.parallel = self.workers > 1;
        c.train.parallel = self.workers > 1;
        c
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.corpus_dir.join("manifest.json"))
    }

    pub fn catalog(&self) -> Result<FeatureCatalog, StageError> {
        let catalog = FeatureCatalog::standard();
        if catalog.version != self.catalog_version {
            return Err(StageError::Config(format!(
                "catalog version {} is not available (this build provides {})",
                self.catalog_version, catalog.version
            )));
        }
        Ok(catalog)
    }

    pub fn model_config(&self, attr_dim: usize) -> Result<ModelConfig, StageError> {
        ModelConfig::by_name(&self.model, attr_dim).ok_or_else(|| StageError::Config(format!("unknown model config {}", self.model)))
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts { dir: self.artifact_dir.clone() }
    }
}

/// Paths of every artifact under one root.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn features(&self) -> PathBuf {
        self.dir.join("features.bin")
    }
    pub fn corpus_index(&self) -> PathBuf {
        self.dir.join("corpus.json")
    }
    pub fn forest(&self) -> PathBuf {
        self.dir.join("forest.json")
    }
    pub fn selection(&self) -> PathBuf {
        self.dir.join("selection.json")
    }
    pub fn importance(&self) -> PathBuf {
        self.dir.join("importance.csv")
    }
    pub fn mapping(&self) -> PathBuf {
        self.dir.join("mapping.json")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model")
    }
    pub fn generated(&self) -> PathBuf {
        self.dir.join("generated")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.dir.join("evaluation.json")
    }
    pub fn stamps(&self) -> PathBuf {
        self.dir.join("stamps.json")
    }
}

/// Ids and labels of the extracted corpus with its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub catalog_version: String,
    pub corpus_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusIndex {
    pub fn held_out(&self) -> Vec<String> {
        self.valid.iter().chain(&self.test).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingArtifact {
    pub table: MappingTable,
    /// Per selected dim, over the training rows.
    pub medians: Vec<f64>,
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub catalog_version: String,
    pub classifier: ClassifierBackend,
    pub n_generated: usize,
    pub objective_accuracy: f64,
    pub per_quadrant: BTreeMap<EmotionQuadrant, f64>,
    /// `confusion[intended][predicted]`.
    pub confusion: [[usize; 4]; 4],
    pub distance_generated: DistanceReport,
    pub distance_real: DistanceReport,
    pub bias: BiasReport,
    /// Accuracy of the classifier on held-out real pieces.
    pub classifier_holdout_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Extract,
    TrainForest,
    SelectAttrs,
    MapEmotion,
    Train,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Extract, Stage::TrainForest, Stage::SelectAttrs, Stage::MapEmotion, Stage::Train, Stage::Generate, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::TrainForest => "train-forest",
            Stage::SelectAttrs => "select-attrs",
            Stage::MapEmotion => "map-emotion",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }

    fn outputs(self, a: &Artifacts) -> Vec<PathBuf> {
        match self {
            Stage::Extract => vec![a.features(), sidecar(&a.features()), a.corpus_index()],
            Stage::TrainForest => vec![a.forest()],
            Stage::SelectAttrs => vec![a.selection(), a.importance()],
            Stage::MapEmotion => vec![a.mapping()],
            Stage::Train => vec![a.model()],
            Stage::Generate => vec![a.generated()],
            Stage::Evaluate => vec![a.evaluation()],
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Extract => &[],
            Stage::TrainForest => &[Stage::Extract],
            Stage::SelectAttrs => &[Stage::TrainForest],
            Stage::MapEmotion => &[Stage::Extract, Stage::SelectAttrs],
            Stage::Train => &[Stage::Extract, Stage::MapEmotion],
            Stage::Generate => &[Stage::Train, Stage::MapEmotion],
            Stage::Evaluate => &[Stage::Extract, Stage::TrainForest, Stage::MapEmotion, Stage::Train, Stage::Generate],
        }
    }

    /// The part of the configuration this stage reads.
    fn config_value(self, c: &PipelineConfig) -> serde_json::Value {
        use serde_json::json;
        match self {
            Stage::Extract => json!({
                "corpus_dir": c.corpus_dir, "manifest": c.manifest_path(), "catalog": c.catalog_version,
                "ratios": c.split_ratios, "seed": c.seed,
            }),
            Stage::TrainForest => json!(c.forest_without_parallel()),
            Stage::SelectAttrs => json!(c.selection),
            Stage::MapEmotion => json!(c.mapping),
            Stage::Train => json!({ "model": c.model, "train": c.train_without_parallel() }),
            Stage::Generate => json!({ "sampler": c.sampler, "n": c.generate_per_quadrant }),
            Stage::Evaluate => json!({
                "classifier": c.classifier, "bias_n": c.bias_n, "bias_per_sample": c.bias_per_sample,
                "sampler": c.sampler,
            }),
        }
    }
}

impl PipelineConfig {
    fn forest_without_parallel(&self) -> ForestConfig {
        ForestConfig { parallel: false, ..self.forest }
    }

    fn train_without_parallel(&self) -> TrainConfig {
        TrainConfig { parallel: false, ..self.train }
    }
}

fn sidecar(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
struct Stamp {
    input: String,
    output: String,
}

type Stamps = BTreeMap<String, Stamp>;

fn read_stamps(a: &Artifacts) -> Stamps {
    fs::read(a.stamps()).ok().and_then(|b| serde_json::from_slice(&b).ok()).unwrap_or_default()
}

fn write_stamps(a: &Artifacts, s: &Stamps) -> Result<(), StageError> {
    fs::create_dir_all(&a.dir)?;
    fs::write(a.stamps(), serde_json::to_vec_pretty(s)?)?;
    Ok(())
}

fn hash_into(h: &mut Sha256, path: &Path, root: &Path) -> std::io::Result<()> {
    if path.is_dir() {
        let mut children: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        children.sort();
        for c in children {
            hash_into(h, &c, root)?;
        }
    } else {
        let rel = path.strip_prefix(root).unwrap_or(path);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = fs::read(path)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

/// Content hash of files and directory trees; `None` if any is missing.
fn hash_paths(paths: &[PathBuf], root: &Path) -> Option<String> {
    let mut h = Sha256::new();
    for p in paths {
        if !p.exists() {
            return None;
        }
        hash_into(&mut h, p, root).ok()?;
    }
    Some(hex::encode(h.finalize()))
}

fn input_hash(stage: Stage, cfg: &PipelineConfig, stamps: &Stamps) -> Result<String, StageError> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(serde_json::to_vec(&stage.config_value(cfg))?);
    for up in stage.upstream() {
        let out = stamps.get(up.name()).map(|s| s.output.as_str()).unwrap_or("");
        h.update(up.name().as_bytes());
        h.update(out.as_bytes());
    }
    if stage == Stage::Extract {
        // corpus content: the manifest plus every file it lists
        let manifest = resolve_manifest(cfg)?;
        h.update(serde_json::to_vec(&manifest)?);
        let files: Vec<PathBuf> = manifest.entries.iter().map(|e| resolve(&cfg.corpus_dir, &e.path)).collect();
        let files_hash = hash_paths(&files, &cfg.corpus_dir).ok_or_else(|| StageError::Config("corpus file missing".into()))?;
        h.update(files_hash.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn resolve_manifest(cfg: &PipelineConfig) -> Result<Manifest, StageError> {
    let path = cfg.manifest_path();
    if path.exists() {
        Ok(Manifest::load(&path)?)
    } else if cfg.manifest.is_none() {
        Ok(Manifest::scan(&cfg.corpus_dir)?)
    } else {
        Err(StageError::Config(format!("manifest {} not found", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: Stage,
    pub executed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageRun>,
    pub total_seconds: f64,
}

impl RunReport {
    pub fn executed(&self) -> Vec<Stage> {
        self.stages.iter().filter(|s| s.executed).map(|s| s.stage).collect()
    }
}

/// Runs one stage unless its stamp is current. Returns whether it ran.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<bool, PipelineError> {
    let wrap = |source: StageError| PipelineError { stage: stage.name(), source };
    let cfg = cfg.resolved();
    let a = cfg.artifacts();
    let mut stamps = read_stamps(&a);
    let input = input_hash(stage, &cfg, &stamps).map_err(wrap)?;
    let outputs = stage.outputs(&a);
    if let Some(s) = stamps.get(stage.name()) {
        if s.input == input && hash_paths(&outputs, &a.dir).as_deref() == Some(s.output.as_str()) {
            log::info!("{}: up to date", stage.name());
            return Ok(false);
        }
    }
    log::info!("{}: running", stage.name());
    execute(stage, &cfg).map_err(wrap)?;
    let output = hash_paths(&outputs, &a.dir)
        .ok_or_else(|| wrap(StageError::Config("stage did not produce its artifacts".into())))?;
    stamps.insert(stage.name().into(), Stamp { input, output });
    write_stamps(&a, &stamps).map_err(wrap)?;
    Ok(true)
}

/// Runs every stage in order on a pool of `cfg.workers` threads.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| PipelineError { stage: "setup", source: StageError::Config(e.to_string()) })?;
    pool.install(|| {
        let t0 = Instant::now();
        let mut stages = Vec::new();
        for stage in Stage::ALL {
            let t = Instant::now();
            let executed = run_stage(stage, cfg)?;
            stages.push(StageRun { stage, executed, seconds: t.elapsed().as_secs_f64() });
        }
        Ok(RunReport { stages, total_seconds: t0.elapsed().as_secs_f64() })
    })
}

fn execute(stage: Stage, cfg: &PipelineConfig) -> Result<(), StageError> {
    fs::create_dir_all(&cfg.artifact_dir)?;
    match stage {
        Stage::Extract => stage_extract(cfg),
        Stage::TrainForest => stage_train_forest(cfg),
        Stage::SelectAttrs => stage_select(cfg),
        Stage::MapEmotion => stage_map(cfg),
        Stage::Train => stage_train(cfg),
        Stage::Generate => stage_generate(cfg),
        Stage::Evaluate => stage_evaluate(cfg),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), StageError> {
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    let bytes = fs::read(path).map_err(|e| StageError::Stale(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn check_version(found: &str, cfg: &PipelineConfig, what: &str) -> Result<(), StageError> {
    if found != cfg.catalog_version {
        return Err(StageError::Stale(format!("{what} uses catalog {found}, config expects {}", cfg.catalog_version)));
    }
    Ok(())
}

/// Reads a score set and quantizes it to the token grid.
pub fn load_quantized(entries: &[ManifestEntry], base: &Path) -> Result<Vec<(String, Score)>, StageError> {
    let grid = QuantizationConfig::default();
    let m = Manifest { entries: entries.to_vec() };
    Ok(m.load_scores(base)?.into_iter().map(|(id, s)| (id, quantize(&s, &grid))).collect())
}

pub fn stage_extract(cfg: &PipelineConfig) -> Result<(), StageError> {
    let a = cfg.artifacts();
    let catalog = cfg.catalog()?;
    let manifest = resolve_manifest(cfg)?;
    let scores = load_quantized(&manifest.entries, &cfg.corpus_dir)?;
    let matrix = extract_corpus(&scores, &catalog)?;
    matrix.write_binary(&a.features())?;
    let split = split_dataset(&manifest, cfg.split_ratios, cfg.seed)?;
    let ids = |m: &Manifest| m.entries.iter().map(|e| e.id.clone()).collect();
    let index = CorpusIndex {
        catalog_version: catalog.version.clone(),
        corpus_dir: cfg.corpus_dir.clone(),
        entries: manifest.entries.clone(),
        train: ids(&split.train),
        valid: ids(&split.valid),
        test: ids(&split.test),
    };
    write_json(&a.corpus_index(), &index)
}

pub fn load_corpus(cfg: &PipelineConfig) -> Result<(CorpusMatrix, CorpusIndex), StageError> {
    let a = cfg.artifacts();
    let matrix = CorpusMatrix::read_binary(&a.features()).map_err(|e| StageError::Stale(format!("features: {e}")))?;
    check_version(&matrix.catalog_version, cfg, "feature matrix")?;
    let index: CorpusIndex = read_json(&a.corpus_index())?;
    check_version(&index.catalog_version, cfg, "corpus index")?;
    Ok((matrix, index))
}

/// Labeled rows for `ids`, in the given order.
pub fn labeled_subset(matrix: &CorpusMatrix, index: &CorpusIndex, ids: &[String]) -> Result<LabeledCorpus, StageError> {
    let labels: BTreeMap<&str, Option<EmotionQuadrant>> = index.entries.iter().map(|e| (e.id.as_str(), e.label)).collect();
    let mut rows = Vec::with_capacity(ids.len());
    let mut ys = Vec::with_capacity(ids.len());
    for id in ids {
        let r = matrix.row_index(id).ok_or_else(|| StageError::Stale(format!("row {id} missing from features")))?;
        let y = labels
            .get(id.as_str())
            .copied()
            .flatten()
            .ok_or_else(|| StageError::Config(format!("piece {id} has no emotion label")))?;
        rows.push(r);
        ys.push(y);
    }
    Ok(LabeledCorpus::new(matrix.select_rows(&rows), ys)?)
}

pub fn stage_train_forest(cfg: &PipelineConfig) -> Result<(), StageError> {
    let (matrix, index) = load_corpus(cfg)?;
    let train_set = labeled_subset(&matrix, &index, &index.train)?;
    let forest = train_forest(&train_set, &cfg.forest)?;
    fs::write(cfg.artifacts().forest(), forest.to_json()?)?;
    Ok(())
}

pub fn load_forest(cfg: &PipelineConfig) -> Result<RandomForest, StageError> {
    let text = fs::read_to_string(cfg.artifacts().forest()).map_err(|e| StageError::Stale(format!("forest: {e}")))?;
    let forest = RandomForest::from_json(&text)?;
    check_version(&forest.catalog_version, cfg, "forest")?;
    Ok(forest)
}

pub fn stage_select(cfg: &PipelineConfig) -> Result<(), StageError> {
    let a = cfg.artifacts();
    let catalog = cfg.catalog()?;
    let forest = load_forest(cfg)?;
    let ranking = feature_importance(&forest);
    let selection = select_attributes(&ranking, &catalog, &cfg.selection)?;
    let ids = catalog.column_ids();
    let mut csv = String::from("rank,index,feature,importance\n");
    for (rank, &i) in ranking.order.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", rank + 1, i, ids[i], ranking.importance[i]));
    }
    fs::write(a.importance(), csv)?;
    write_json(&a.selection(), &selection)
}

pub fn load_selection(cfg: &PipelineConfig) -> Result<Selection, StageError> {
    let s: Selection = read_json(&cfg.artifacts().selection())?;
    check_version(&s.catalog_version, cfg, "selection")?;
    Ok(s)
}

pub fn stage_map(cfg: &PipelineConfig) -> Result<(), StageError> {
    let (matrix, index) = load_corpus(cfg)?;
    let selection = load_selection(cfg)?;
    let train_set = labeled_subset(&matrix, &index, &index.train)?;
    let table = compute_mapping(&train_set, &selection.indices, cfg.mapping)?;
    let projected = train_set.matrix.project(&selection.indices);
    let medians = compute_medians(&projected)?;
    let standardizer = Standardizer::fit(&projected)?;
    write_json(&cfg.artifacts().mapping(), &MappingArtifact { table, medians, standardizer })
}

pub fn load_mapping(cfg: &PipelineConfig) -> Result<MappingArtifact, StageError> {
    let m: MappingArtifact = read_json(&cfg.artifacts().mapping())?;
    check_version(&m.table.catalog_version, cfg, "mapping")?;
    Ok(m)
}

/// Token sequences of the training pieces paired with their binarized
/// selected attributes.
pub fn training_pairs(cfg: &PipelineConfig, max_len: usize) -> Result<Vec<(TokenSequence, crate::mapping::BitVector)>, StageError> {
    let (matrix, index) = load_corpus(cfg)?;
    let mapping = load_mapping(cfg)?;
    let grid = QuantizationConfig::default();
    let by_id: BTreeMap<&str, &ManifestEntry> = index.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let entries: Vec<ManifestEntry> = index.train.iter().map(|id| by_id[id.as_str()].clone()).collect();
    let scores = load_quantized(&entries, &index.corpus_dir)?;
    scores
        .iter()
        .map(|(id, s)| {
            let r = matrix.row_index(id).ok_or_else(|| StageError::Stale(format!("row {id} missing")))?;
            let values: Vec<f64> = mapping.table.indices.iter().map(|&c| matrix.get(r, c)).collect();
            let bits = binarize(&values, &mapping.medians)?;
            Ok((score_to_tokens(s, &grid).truncated(max_len), bits))
        })
        .collect()
}

pub fn stage_train(cfg: &PipelineConfig) -> Result<(), StageError> {
    let mapping = load_mapping(cfg)?;
    let model_cfg = cfg.model_config(mapping.table.indices.len())?;
    let data = training_pairs(cfg, model_cfg.max_len)?;
    let mut state = ModelState::new(model_cfg, cfg.train.seed)?;
    let report = train(&mut state, &data, &cfg.train)?;
    let dir = cfg.artifacts().model();
    save_checkpoint(
        &dir,
        &Checkpoint {
            state,
            catalog_version: mapping.table.catalog_version.clone(),
            indices: mapping.table.indices.clone(),
            medians: mapping.medians.clone(),
            step: cfg.train.max_steps,
        },
    )?;
    fs::write(dir.join("train_log.csv"), report.to_csv())?;
    Ok(())
}

pub fn load_model(cfg: &PipelineConfig) -> Result<Checkpoint, StageError> {
    let ck = load_checkpoint(&cfg.artifacts().model())?;
    check_version(&ck.catalog_version, cfg, "model checkpoint")?;
    Ok(ck)
}

/// Samples `n` pieces for `q` from the mapping table's primary vector.
pub fn generate_for(
    ck: &Checkpoint,
    table: &MappingTable,
    q: EmotionQuadrant,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<TokenSequence>, StageError> {
    if table.indices != ck.indices {
        return Err(StageError::Stale("mapping and checkpoint use different attribute selections".into()));
    }
    let bits = binarize(table.primary(q)?, &ck.medians)?;
    (0..n)
        .map(|i| {
            let seed = sampler.seed.wrapping_add((q.index() * n + i) as u64);
            Ok(generate_from_bits(&ck.state, &bits, &SamplerConfig { seed, ..*sampler })?)
        })
        .collect()
}

/// Writes generated pieces as `.mid` files plus a labeled manifest.
pub fn write_generated(dir: &Path, pieces: &[(String, Option<EmotionQuadrant>, TokenSequence)]) -> Result<Manifest, StageError> {
    fs::create_dir_all(dir)?;
    let grid = QuantizationConfig::default();
    let mut manifest = Manifest::default();
    for (id, q, seq) in pieces {
        let path = PathBuf::from(format!("{id}.mid"));
        let bytes = write_midi(&score_to_midi(&decode(seq, &grid))).map_err(|e| StageError::Config(e.to_string()))?;
        fs::write(dir.join(&path), bytes)?;
        fs::write(dir.join(format!("{id}.tokens")), crate::score::write_token_text(seq))?;
        manifest.entries.push(ManifestEntry { id: id.clone(), path, label: *q });
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn stage_generate(cfg: &PipelineConfig) -> Result<(), StageError> {
    let ck = load_model(cfg)?;
    let mapping = load_mapping(cfg)?;
    let dir = cfg.artifacts().generated();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let mut pieces = Vec::new();
    for q in EmotionQuadrant::ALL {
        for (i, seq) in generate_for(&ck, &mapping.table, q, cfg.generate_per_quadrant, &cfg.sampler)?.into_iter().enumerate() {
            pieces.push((format!("gen_{q}_{i:04}"), Some(q), seq));
        }
    }
    write_generated(&dir, &pieces)?;
    Ok(())
}

/// Bias analysis on the held-out pieces, optionally with generation.
pub fn analyze_bias(cfg: &PipelineConfig, with_generation: bool) -> Result<BiasReport, StageError> {
    let catalog = cfg.catalog()?;
    let (matrix, index) = load_corpus(cfg)?;
    let forest = load_forest(cfg)?;
    let mapping = load_mapping(cfg)?;
    let held_out = labeled_subset(&matrix, &index, &index.held_out())?;
    let ck = if with_generation { Some(load_model(cfg)?) } else { None };
    let generator = ck.as_ref().map(|ck| Generator {
        model: &ck.state,
        medians: &ck.medians,
        sampler: SamplerConfig { seed: cfg.sampler.seed.wrapping_add(1 << 32), ..cfg.sampler },
        grid: QuantizationConfig::default(),
        per_sample: cfg.bias_per_sample,
    });
    Ok(bias_experiment(&held_out, &mapping.table.indices, cfg.bias_n, &forest, &catalog, generator.as_ref())?)
}

pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<(), StageError> {
    let catalog = cfg.catalog()?;
    let (matrix, index) = load_corpus(cfg)?;
    let forest = load_forest(cfg)?;
    let mapping = load_mapping(cfg)?;
    let grid = QuantizationConfig::default();
    let gen_dir = cfg.artifacts().generated();
    let gen_manifest = Manifest::load(&gen_dir.join("manifest.json"))?;
    let generated = gen_manifest.load_scores(&gen_dir)?;
    let intended = gen_manifest.labels().ok_or_else(|| StageError::Stale("generated manifest lacks labels".into()))?;
    let held_out = labeled_subset(&matrix, &index, &index.held_out())?;

    let vectors: Vec<Vec<f64>> = generated.iter().map(|(_, s)| extract_features(s, &catalog).values).collect();
    let (predicted, holdout_pred) = match cfg.classifier {
        ClassifierBackend::Forest => (
            vectors.iter().map(|v| forest.predict_row(v)).collect::<Vec<_>>(),
            (0..held_out.len()).map(|r| forest.predict_row(held_out.matrix.row(r))).collect::<Vec<_>>(),
        ),
        ClassifierBackend::Transformer => {
            let train_set = labeled_subset(&matrix, &index, &index.train)?;
            let by_id: BTreeMap<&str, &ManifestEntry> = index.entries.iter().map(|e| (e.id.as_str(), e)).collect();
            let load = |ids: &[String]| -> Result<Vec<TokenSequence>, StageError> {
                let entries: Vec<_> = ids.iter().map(|id| by_id[id.as_str()].clone()).collect();
                Ok(load_quantized(&entries, &index.corpus_dir)?.iter().map(|(_, s)| score_to_tokens(s, &grid)).collect())
            };
            let mut ccfg = ClassifierConfig::desk();
            ccfg.train.seed = cfg.seed.wrapping_add(5);
            let data: Vec<_> = load(&index.train)?.into_iter().zip(train_set.labels.iter().copied()).collect();
            let mut clf = TransformerClassifier::new(&ccfg)?;
            clf.fit(&data, &ccfg.train)?;
            let gen_pred = generated
                .iter()
                .map(|(_, s)| clf.predict(&score_to_tokens(s, &grid)))
                .collect::<Result<Vec<_>, _>>()?;
            let real_pred = load(&index.held_out())?.iter().map(|t| clf.predict(t)).collect::<Result<Vec<_>, _>>()?;
            (gen_pred, real_pred)
        }
    };
    let mut confusion = [[0usize; 4]; 4];
    for (t, p) in intended.iter().zip(&predicted) {
        confusion[t.index()][p.index()] += 1;
    }
    let mut per_quadrant = BTreeMap::new();
    for q in EmotionQuadrant::ALL {
        let (p, t): (Vec<_>, Vec<_>) = predicted.iter().zip(&intended).filter(|(_, &t)| t == q).unzip();
        if !t.is_empty() {
            per_quadrant.insert(q, accuracy(&p, &t));
        }
    }

    let z = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|v| {
                let sel: Vec<f64> = mapping.table.indices.iter().map(|&c| v[c]).collect();
                mapping.standardizer.transform(&sel)
            })
            .collect()
    };
    let gen_z = z(&vectors);
    let real_rows: Vec<Vec<f64>> = (0..held_out.len()).map(|r| held_out.matrix.row(r).to_vec()).collect();
    let real_z = z(&real_rows);
    let distance_generated = l1_distance_analysis(&gen_z, &intended)?;
    let distance_real = l1_distance_analysis(&real_z, &held_out.labels)?;
    let bias = analyze_bias(cfg, true)?;

    let report = EvaluationReport {
        catalog_version: catalog.version.clone(),
        classifier: cfg.classifier,
        n_generated: generated.len(),
        objective_accuracy: accuracy(&predicted, &intended),
        per_quadrant,
        confusion,
        distance_generated: distance_generated.clone(),
        distance_real,
        bias,
        classifier_holdout_accuracy: accuracy(&holdout_pred, &held_out.labels),
    };
    let a = cfg.artifacts();
    let extra = a.dir.join("reports");
    fs::create_dir_all(&extra)?;
    fs::write(extra.join("distance_curves.csv"), distance_generated.curves_csv())?;
    let mut all_z = gen_z;
    all_z.extend(real_z);
    if let Ok(p) = pca_project(&all_z) {
        let mut ids: Vec<String> = generated.iter().map(|(id, _)| id.clone()).collect();
        ids.extend(held_out.matrix.row_ids.iter().cloned());
        let mut labels = intended.clone();
        labels.extend(held_out.labels.iter().copied());
        fs::write(extra.join("projection.csv"), p.to_csv(&ids, &labels))?;
    }
    write_json(&a.evaluation(), &report)
}

pub fn load_evaluation(cfg: &PipelineConfig) -> Result<EvaluationReport, StageError> {
    read_json(&cfg.artifacts().evaluation())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_corpus, SynthSpec};

    fn tiny_config(root: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            corpus_dir: root.join("corpus"),
            artifact_dir: root.join("artifacts"),
            model: "tiny".into(),
            selection: SelectionConfig::TopK { k: 4 },
            generate_per_quadrant: 2,
            bias_n: 1,
            bias_per_sample: 1,
            ..PipelineConfig::default()
        };
        cfg.forest.n_trees = 10;
        cfg.train.max_steps = 3;
        cfg.train.batch_size = 2;
        cfg.sampler.max_tokens = 16;
        cfg
    }

    #[test]
    fn fresh_run_then_no_op_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        synth_corpus(&cfg.corpus_dir, &SynthSpec::default(), 10, 1).unwrap();
        let first = run_pipeline(&cfg).unwrap();
        assert_eq!(first.executed(), Stage::ALL.to_vec());
        let a = cfg.artifacts();
        for p in [a.features(), a.forest(), a.selection(), a.mapping(), a.model(), a.generated(), a.evaluation()] {
            assert!(p.exists(), "{}", p.display());
        }
        let second = run_pipeline(&cfg).unwrap();
        assert!(second.executed().is_empty());

        // a changed sampler only reruns generation and evaluation
        let mut changed = cfg.clone();
        changed.sampler.p = 0.5;
        let third = run_pipeline(&changed).unwrap();
        assert_eq!(third.executed(), vec![Stage::Generate, Stage::Evaluate]);

        // a tampered artifact is detected and rebuilt
        fs::write(a.forest(), b"{}").unwrap();
        let err = load_forest(&changed);
        assert!(err.is_err());
        let fourth = run_pipeline(&changed).unwrap();
        assert!(fourth.executed().contains(&Stage::TrainForest));
    }

    #[test]
    fn stale_catalog_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        synth_corpus(&cfg.corpus_dir, &SynthSpec::default(), 10, 1).unwrap();
        run_stage(Stage::Extract, &cfg).unwrap();
        let other = PipelineConfig { catalog_version: "other-9".into(), ..cfg.clone() };
        assert!(matches!(load_corpus(&other), Err(StageError::Stale(_))));
        let err = run_stage(Stage::Extract, &other).unwrap_err();
        assert_eq!(err.stage, "extract");
    }
}
