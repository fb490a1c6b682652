//! End-to-end timing of the pipeline's hot paths: model forward, one
//! episodic SUTA adaptation, and WER scoring.

use criterion::{criterion_group, criterion_main, Criterion};

use suta_core::adapt::{run_adaptation, AdaptConfig};
use suta_core::corpus::{generate_corpus, CorpusSpec};
use suta_core::eval::{wer, Transcript};
use suta_core::model::{ModelConfig, ModelState};
use suta_core::Utterance;

fn fixture() -> (ModelState, Vec<Utterance>) {
    let model = ModelState::init(&ModelConfig { seed: 7, ..Default::default() }).unwrap();
    let corpus = generate_corpus(&CorpusSpec { utterances: 4, seed: 11, ..Default::default() }).unwrap();
    (model, corpus)
}

fn bench_forward(c: &mut Criterion) {
    let (model, corpus) = fixture();
    let utt = &corpus[0];
    c.bench_function("forward_pass", |b| {
        b.iter(|| std::hint::black_box(model.forward(&utt.features).unwrap()))
    });
}

fn bench_adapt(c: &mut Criterion) {
    let (model, corpus) = fixture();
    let utt = &corpus[0];
    let config = AdaptConfig::default();
    c.bench_function("suta_adapt_one_utterance", |b| {
        b.iter(|| std::hint::black_box(run_adaptation(&model, utt, &config).unwrap()))
    });
}

fn bench_wer(c: &mut Criterion) {
    let reference = Transcript::from_text("the quick brown fox jumps over the lazy dog");
    let hypothesis = Transcript::from_text("the quack brown fox jumped over lazy dog again");
    c.bench_function("wer", |b| {
        b.iter(|| std::hint::black_box(wer(&reference, &hypothesis).unwrap()))
    });
}

criterion_group!(benches, bench_forward, bench_adapt, bench_wer);
criterion_main!(benches);
