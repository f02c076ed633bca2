use std::hint::black_box;

use bioner_core::codec::{decode_batch, encode, DecodeJob};
use bioner_core::eval::{evaluate_corpus, DeviationMeasure, Prediction};
use bioner_core::promptgen::{build_training_set, PromptTemplate};
use bioner_core::{DatasetSchema, DecodeOptions, EntitySpan, ExecMode, Language, SchemaRegistry, Sentence, Strategy};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

const WORDS: &[&str] = &[
    "IL-5", "promoter", "enhancer", "luciferase", "gene", "construct", "NF-kappa", "B", "binds", "the", "p50", "subunit",
    "in", "T", "cells", "activation", "of", "transcription", "factor", "expression",
];

fn schema() -> DatasetSchema {
    DatasetSchema::new("GENIA", Language::En, &[("DNA", "DNA"), ("Protein", "proteins"), ("cell_type", "cell types")])
}

/// Deterministic sentences of about 30 words with three entities each.
fn corpus(n: usize) -> Vec<Sentence> {
    (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..30).map(|k| WORDS[(i * 7 + k * 3) % WORDS.len()]).collect();
            let text = words.join(" ");
            let mut s = Sentence::new(format!("b{i}"), "GENIA", Language::En, text.clone());
            let starts: Vec<usize> = words
                .iter()
                .scan(0, |pos, w| {
                    let at = *pos;
                    *pos += w.chars().count() + 1;
                    Some(at)
                })
                .collect();
            for (k, etype) in [(2, "Protein"), (10, "DNA"), (20, "cell_type")] {
                let end = starts[k + 1] + words[k + 1].chars().count();
                s.entities.push(EntitySpan::from_source(&text, starts[k], end, etype).unwrap());
            }
            s
        })
        .collect()
}

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench_decode(c: &mut Criterion) {
    let schema = schema();
    let mut group = c.benchmark_group("decode_batch");
    for n in [100, 1000] {
        let sentences = corpus(n);
        let payloads: Vec<String> =
            sentences.iter().map(|s| encode(Strategy::Symbolic, s, &schema).unwrap().payload).collect();
        let jobs: Vec<DecodeJob> = sentences
            .iter()
            .zip(&payloads)
            .map(|(s, p)| DecodeJob { strategy: Strategy::Symbolic, payload: p, schema: &schema, source: s })
            .collect();
        group.throughput(Throughput::Elements(n as u64));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &jobs, |b, jobs| {
                b.iter(|| decode_batch(black_box(jobs), &DecodeOptions::default(), mode))
            });
        }
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate_corpus");
    for n in [1000, 10_000] {
        let gold = corpus(n);
        // shift every other prediction so the taxonomy and histogram do work
        let preds: Vec<Vec<EntitySpan>> = gold
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.entities
                    .iter()
                    .map(|e| if i % 2 == 0 { e.clone() } else { EntitySpan::from_source(&s.text, e.start, e.end - 1, e.etype.clone()).unwrap() })
                    .collect()
            })
            .collect();
        let pairs: Vec<Prediction> = gold.iter().zip(&preds).map(|(g, p)| Prediction { gold: g, entities: p }).collect();
        group.throughput(Throughput::Elements(n as u64));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &pairs, |b, pairs| {
                b.iter(|| evaluate_corpus(black_box(pairs), DeviationMeasure::MaxBoundaryOffset, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_build(c: &mut Criterion) {
    let schema = schema();
    let reg: SchemaRegistry = [(schema.name.clone(), schema)].into();
    let tmpl = PromptTemplate::builtin(Strategy::Symbolic);
    let mut group = c.benchmark_group("build_training_set");
    for n in [100, 1000] {
        let sentences = corpus(n);
        group.throughput(Throughput::Elements(n as u64));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &sentences, |b, s| {
                b.iter(|| build_training_set(black_box(s), &reg, &tmpl, mode))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_decode, bench_evaluate, bench_build);
criterion_main!(benches);
