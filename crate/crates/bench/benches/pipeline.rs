use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use emotune::features::{extract_features, CorpusMatrix, FeatureCatalog};
use emotune::forest::{train_forest, ForestConfig, LabeledCorpus};
use emotune::model::{Decoder, ModelConfig, ModelState};
use emotune::score::{score_to_midi, score_to_tokens, tokens_to_score, QuantizationConfig};
use emotune::{parse_midi, synth_scores, write_midi, SynthSpec};
use std::hint::black_box;

fn corpus(n: usize) -> (Vec<emotune::dataset::SynthPiece>, FeatureCatalog) {
    (synth_scores(&SynthSpec::with_noise(0.3), n, 1).unwrap(), FeatureCatalog::standard())
}

fn bench_symbolic(c: &mut Criterion) {
    let (pieces, catalog) = corpus(2);
    let score = &pieces[0].score;
    let grid = QuantizationConfig::default();
    let bytes = write_midi(&score_to_midi(score)).unwrap();
    c.bench_function("midi_parse", |b| b.iter(|| parse_midi(black_box(&bytes)).unwrap()));
    c.bench_function("extract_features", |b| b.iter(|| extract_features(black_box(score), &catalog)));
    c.bench_function("tokenize", |b| b.iter(|| score_to_tokens(black_box(score), &grid)));
    let seq = score_to_tokens(score, &grid);
    c.bench_function("detokenize", |b| b.iter(|| tokens_to_score(black_box(&seq), &grid)));
}

fn bench_forest(c: &mut Criterion) {
    let (pieces, catalog) = corpus(25);
    let rows: Vec<f64> = pieces.iter().flat_map(|p| extract_features(&p.score, &catalog).values).collect();
    let m = CorpusMatrix::new(
        catalog.version.clone(),
        pieces.iter().map(|p| p.id.clone()).collect(),
        catalog.column_ids(),
        rows,
    )
    .unwrap();
    let lc = LabeledCorpus::new(m, pieces.iter().map(|p| p.label).collect()).unwrap();
    let cfg = ForestConfig { n_trees: 20, ..ForestConfig::default() };
    let mut g = c.benchmark_group("forest");
    g.sample_size(10);
    g.bench_function("train_20_trees_100x534", |b| b.iter(|| train_forest(black_box(&lc), &cfg).unwrap()));
    g.finish();
}

fn bench_model(c: &mut Criterion) {
    let (pieces, _) = corpus(1);
    let tokens: Vec<usize> = score_to_tokens(&pieces[0].score, &QuantizationConfig::default()).truncated(256).ids();
    let model = ModelState::new(ModelConfig::desk(20), 0).unwrap();
    let attr = vec![1.0; 20];
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("loss_and_grad_desk", |b| {
        b.iter_batched(
            || vec![0.0; model.param_count()],
            |mut grad| model.loss_and_grad(black_box(&tokens), &attr, 1.0, None, &mut grad).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.bench_function("decoder_64_steps_desk", |b| {
        b.iter(|| {
            let mut d = Decoder::new(&model, &attr).unwrap();
            for &t in &tokens[..64] {
                black_box(d.step(t).unwrap());
            }
        })
    });
    g.finish();
}

criterion_group!(benches, bench_symbolic, bench_forest, bench_model);
criterion_main!(benches);
