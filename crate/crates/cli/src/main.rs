use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use emotune::dataset::{split_dataset, synth_corpus, DatasetError, Manifest, SynthSpec};
use emotune::emotion::EmotionQuadrant;
use emotune::forest::SelectionConfig;
use emotune::mapping::{binarize, MappingMethod};
use emotune::model::generate_from_bits;
use emotune::pipeline::{self, ClassifierBackend, PipelineConfig, PipelineError, Stage, StageError};
use emotune::SamplerConfig;

#[derive(Parser)]
#[command(name = "emotune", version, about = "Emotion-conditioned symbolic music generation")]
struct Cli {
    /// Pipeline configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root.
    #[arg(long, global = true, env = "EMOTUNE_ARTIFACTS")]
    artifacts: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for within-stage parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of pieces per quadrant rendered from another archetype.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
    /// Split a manifest into train/valid/test manifests.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
    },
    /// Extract attribute vectors of the corpus.
    Extract(CorpusArgs),
    /// Train the emotion random forest.
    TrainForest {
        #[arg(long)]
        trees: Option<usize>,
    },
    /// Select attributes by forest importance.
    SelectAttrs(SelectArgs),
    /// Map each emotion quadrant to attribute values.
    MapEmotion {
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Train the attribute-conditioned generator.
    Train(TrainArgs),
    /// Generate music for an emotion or an attribute file.
    Generate(GenerateArgs),
    /// Objective accuracy, distance analysis and bias analysis.
    Evaluate {
        #[arg(long, value_enum)]
        classifier: Option<Backend>,
    },
    /// Center/boundary analysis on held-out pieces.
    AnalyzeBias {
        #[arg(long)]
        n: Option<usize>,
        /// Only classify real pieces.
        #[arg(long)]
        no_generation: bool,
    },
    /// Write the feature catalog reference (markdown).
    Catalog {
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage, skipping those that are up to date.
    Run {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long, conflicts_with_all = ["random", "manual17"])]
    top_k: Option<usize>,
    /// Random selection of N attributes spread over feature groups.
    #[arg(long, conflicts_with = "manual17")]
    random: Option<usize>,
    #[arg(long)]
    manual17: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// desk, full or tiny.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_quadrant, required_unless_present = "attr_file")]
    emotion: Option<EmotionQuadrant>,
    /// JSON array of raw attribute values over the selected dimensions.
    #[arg(long, conflicts_with = "emotion")]
    attr_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Closest,
    Center,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Forest,
    Transformer,
}

fn parse_quadrant(s: &str) -> Result<EmotionQuadrant, String> {
    s.parse().map_err(|_| format!("expected Q1, Q2, Q3 or Q4, got {s}"))
}

fn base_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(a) = &cli.artifacts {
        cfg.artifact_dir = a.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn apply_corpus(cfg: &mut PipelineConfig, a: &CorpusArgs) {
    if let Some(c) = &a.corpus {
        cfg.corpus_dir = c.clone();
    }
    if a.manifest.is_some() {
        cfg.manifest = a.manifest.clone();
    }
}

fn apply_select(cfg: &mut PipelineConfig, a: &SelectArgs) {
    if let Some(k) = a.top_k {
        cfg.selection = SelectionConfig::TopK { k };
    } else if let Some(n) = a.random {
        cfg.selection = SelectionConfig::RandomGrouped { n, seed: cfg.seed };
    } else if a.manual17 {
        cfg.selection = SelectionConfig::Manual17;
    }
}

fn apply_train(cfg: &mut PipelineConfig, a: &TrainArgs) {
    if let Some(m) = &a.model {
        if m == "full" && a.steps.is_none() && a.lr.is_none() {
            cfg.train = emotune::model::TrainConfig { seed: cfg.train.seed, ..emotune::model::TrainConfig::full() };
        }
        cfg.model = m.clone();
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.base_lr = lr;
    }
}

fn stage(stage: Stage, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let ran = pipeline::run_stage(stage, cfg)?;
    println!("{}", serde_json::json!({ "stage": stage.name(), "executed": ran }));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::SynthCorpus { out, n, noise, label_noise } => {
            let spec = SynthSpec { noise, boundary_label_noise: label_noise, ..SynthSpec::default() };
            let m = synth_corpus(&out, &spec, n, cfg.seed)?;
            println!("{}", serde_json::json!({ "files": m.entries.len(), "manifest": out.join("manifest.json") }));
        }
        Command::Split { manifest, out, ratios } => {
            let [a, b, c] = ratios[..] else { bail!(UsageError("--ratios takes exactly three values".into())) };
            let m = Manifest::load(&manifest)?;
            let s = split_dataset(&m, [a, b, c], cfg.seed)?;
            // keep paths valid relative to the new manifests
            let base = manifest.parent().map(PathBuf::from).unwrap_or_default();
            let base = fs::canonicalize(&base).unwrap_or(base);
            for (name, mut part) in [("train", s.train), ("valid", s.valid), ("test", s.test)] {
                for e in &mut part.entries {
                    if e.path.is_relative() {
                        e.path = base.join(&e.path);
                    }
                }
                part.save(&out.join(format!("{name}.json")))?;
                println!("{}", serde_json::json!({ "split": name, "entries": part.entries.len() }));
            }
        }
        Command::Extract(a) => {
            apply_corpus(&mut cfg, &a);
            stage(Stage::Extract, &cfg)?;
        }
        Command::TrainForest { trees } => {
            if let Some(t) = trees {
                cfg.forest.n_trees = t;
            }
            stage(Stage::TrainForest, &cfg)?;
        }
        Command::SelectAttrs(a) => {
            apply_select(&mut cfg, &a);
            stage(Stage::SelectAttrs, &cfg)?;
        }
        Command::MapEmotion { method, clusters } => {
            if let Some(m) = method {
                cfg.mapping = match m {
                    Method::Closest => MappingMethod::Closest,
                    Method::Center => MappingMethod::Center,
                    Method::Kmeans => MappingMethod::KMeans { k_clusters: clusters.unwrap_or(4), seed: cfg.seed },
                };
            }
            stage(Stage::MapEmotion, &cfg)?;
        }
        Command::Train(a) => {
            apply_train(&mut cfg, &a);
            stage(Stage::Train, &cfg)?;
        }
        Command::Generate(a) => generate(&cfg, a)?,
        Command::Evaluate { classifier } => {
            if let Some(b) = classifier {
                cfg.classifier = match b {
                    Backend::Forest => ClassifierBackend::Forest,
                    Backend::Transformer => ClassifierBackend::Transformer,
                };
            }
            stage(Stage::Evaluate, &cfg)?;
            let report = pipeline::load_evaluation(&cfg)?;
            println!("{}", serde_json::json!({
                "objective_accuracy": report.objective_accuracy,
                "per_quadrant": report.per_quadrant,
                "intra": report.distance_generated.intra_mean,
                "inter": report.distance_generated.inter_mean,
            }));
        }
        Command::AnalyzeBias { n, no_generation } => {
            if let Some(n) = n {
                cfg.bias_n = n;
            }
            let report = pipeline::analyze_bias(&cfg.resolved(), !no_generation)?;
            let path = cfg.artifact_dir.join("reports").join("bias.json");
            fs::create_dir_all(path.parent().expect("reports dir"))?;
            fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Catalog { out } => {
            let doc = cfg.catalog()?.reference_markdown();
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent() {
                        fs::create_dir_all(dir)?;
                    }
                    fs::write(&path, doc)?;
                }
                None => print!("{doc}"),
            }
        }
        Command::Run { corpus, select, train } => {
            apply_corpus(&mut cfg, &corpus);
            apply_select(&mut cfg, &select);
            apply_train(&mut cfg, &train);
            let report = pipeline::run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn generate(cfg: &PipelineConfig, a: GenerateArgs) -> anyhow::Result<()> {
    let cfg = cfg.resolved();
    let mut sampler: SamplerConfig = cfg.sampler;
    if let Some(p) = a.top_p {
        sampler.p = p;
    }
    if let Some(t) = a.temperature {
        sampler.temperature = t;
    }
    if let Some(m) = a.max_tokens {
        sampler.max_tokens = m;
    }
    if !(sampler.p > 0.0 && sampler.p <= 1.0) || !(sampler.temperature > 0.0) {
        bail!(UsageError("--top-p must lie in (0, 1] and --temperature must be positive".into()));
    }
    let ck = pipeline::load_model(&cfg)?;
    let out = a.out.unwrap_or_else(|| cfg.artifact_dir.join("generated-cli"));
    let pieces = if let Some(q) = a.emotion {
        let mapping = pipeline::load_mapping(&cfg)?;
        pipeline::generate_for(&ck, &mapping.table, q, a.n, &sampler)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("{q}_{i:04}"), Some(q), s))
            .collect::<Vec<_>>()
    } else {
        let path = a.attr_file.expect("clap enforces one of --emotion/--attr-file");
        let values: Vec<f64> = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| DataError(format!("{}: {e}", path.display())))?;
        let bits = binarize(&values, &ck.medians).map_err(|e| DataError(e.to_string()))?;
        let mut pieces = Vec::with_capacity(a.n);
        for i in 0..a.n {
            let s = SamplerConfig { seed: sampler.seed.wrapping_add(i as u64), ..sampler };
            pieces.push((format!("attr_{i:04}"), None, generate_from_bits(&ck.state, &bits, &s)?));
        }
        pieces
    };
    let manifest = pipeline::write_generated(&out, &pieces)?;
    println!("{}", serde_json::json!({ "generated": manifest.entries.len(), "out": out }));
    Ok(())
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct DataError(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<DataError>().is_some() || err.downcast_ref::<DatasetError>().is_some() {
        return 2;
    }
    let stage_err = err
        .downcast_ref::<PipelineError>()
        .map(|p| &p.source)
        .or_else(|| err.downcast_ref::<StageError>());
    match stage_err {
        Some(e) if e.is_data_error() => 2,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None if err.downcast_ref::<emotune::model::ModelError>().is_some() => 2,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
