use std::hint::black_box;
use std::path::Path;
use std::sync::Arc;

use colosla_bench::telemetry;
use colosla_core::docio::SanitizedDocument;
use colosla_core::extraction::{extract_rules, DeterministicBackend, ExtractionConfig};
use colosla_core::labeler::{build_dataset, label_window, DatasetConfig};
use colosla_core::model::{build_model, ModelConfig, Predictor};
use colosla_core::rulesdb::band_of;
use colosla_core::stream::{verify_chain, RulePersistencePredictor, StreamConfig, StreamEngine};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

fn bands(c: &mut Criterion) {
    let (rules, _) = telemetry(1);
    let temp = rules.get("CUST_A_TEMP_01").unwrap().clone();
    let xs: Vec<f64> = (0..1000).map(|i| 10.0 + i as f64 * 0.025).collect();
    let mut g = c.benchmark_group("band_of");
    g.throughput(Throughput::Elements(xs.len() as u64));
    g.bench_function("temperature_1k", |b| b.iter(|| xs.iter().map(|&x| band_of(&temp, black_box(x)).index()).sum::<usize>()));
    g.finish();
}

fn labeling(c: &mut Criterion) {
    let (rules, pts) = telemetry(24);
    let ds = build_dataset(&pts, &rules, &DatasetConfig::default()).unwrap();
    let windows: Vec<_> = ds.examples.iter().map(|e| e.window.clone()).collect();
    let mut g = c.benchmark_group("labeler");
    g.throughput(Throughput::Elements(windows.len() as u64 * rules.len() as u64));
    g.bench_function("label_day", |b| {
        b.iter(|| {
            let mut n = 0;
            for w in &windows {
                for r in &rules {
                    n += label_window(w, r).unwrap().index();
                }
            }
            n
        })
    });
    g.sample_size(10);
    g.bench_function("build_dataset_day", |b| b.iter(|| build_dataset(black_box(&pts), &rules, &DatasetConfig::default()).unwrap().len()));
    g.finish();
}

fn model(c: &mut Criterion) {
    let (rules, pts) = telemetry(6);
    let ds = build_dataset(&pts, &rules, &DatasetConfig::default()).unwrap();
    let m = build_model(ModelConfig::for_rules(&rules, "Customer_A")).unwrap();
    let lookback = ds.examples[0].window.lookback.clone();
    let batch: Vec<Vec<Vec<f64>>> = ds.examples.iter().take(32).map(|e| e.window.lookback.clone()).collect();
    let mut g = c.benchmark_group("model");
    g.bench_function("predict_one", |b| b.iter(|| m.predict(black_box(&lookback)).unwrap()));
    g.throughput(Throughput::Elements(batch.len() as u64));
    g.bench_function("forward_batch32", |b| b.iter(|| m.forward(black_box(&batch)).unwrap()));
    g.finish();
}

fn streaming(c: &mut Criterion) {
    let (rules, pts) = telemetry(6);
    let cfg = StreamConfig::default();
    let order = ModelConfig::for_rules(&rules, "Customer_A").rule_heads;
    let stub: Arc<dyn Predictor> = Arc::new(RulePersistencePredictor::new(&rules, &order, cfg.lookback, cfg.cadence_s).unwrap());
    let mut g = c.benchmark_group("stream");
    g.throughput(Throughput::Elements(pts.len() as u64));
    g.sample_size(10);
    g.bench_function("stub_6h", |b| {
        b.iter_batched(
            || StreamEngine::new("Customer_A", stub.clone(), &rules, cfg).unwrap(),
            |mut e| e.step(&pts).unwrap().events.len(),
            BatchSize::LargeInput,
        )
    });
    let mut engine = StreamEngine::new("Customer_A", stub.clone(), &rules, cfg).unwrap();
    let records = engine.step(&pts).unwrap().audit;
    g.throughput(Throughput::Elements(records.len() as u64));
    g.bench_function("verify_chain", |b| b.iter(|| verify_chain(black_box(&records))));
    g.finish();
}

fn extraction(c: &mut Criterion) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/sla_customer_a.sanitized.json");
    let doc = SanitizedDocument::read(&path).unwrap();
    c.bench_function("extract_fixture", |b| {
        b.iter(|| extract_rules(black_box(&doc), &DeterministicBackend, &ExtractionConfig::default()).unwrap().rules.len())
    });
}

criterion_group!(benches, bands, labeling, model, streaming, extraction);
criterion_main!(benches);
