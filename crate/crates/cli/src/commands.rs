use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context};
use bioner_core::codec::{decode_batch, DecodeJob, DiagnosticKind};
use bioner_core::corpus::{load_corpus, load_schema_dir, write_corpus, LoadMode, SchemaRegistry};
use bioner_core::eval::{evaluate_corpus, render_report, DeviationMeasure, Prediction, ReportFormat};
use bioner_core::inference::{
    run_batch, Backend, BatchOptions, EchoGoldBackend, GenerationRequest, PerturbingBackend, RetryPolicy,
    WireBackend, WireConfig,
};
use bioner_core::promptgen::{build_training_set, emit_finetune_file, mix_datasets, render_prompt, PromptTemplate};
use bioner_core::selector::{
    emit_selector_file, filter_predictions, gen_selector_dataset, ConstantSelector, FilterOptions, GenerativeSelector,
    GoldOracleSelector, Markers, SampleOptions, SelectorBackend,
};
use bioner_core::{DecodeOptions, ExecMode, Sentence, Strategy};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::UsageError;

fn schemas(dir: &Path) -> anyhow::Result<SchemaRegistry> {
    load_schema_dir(dir).with_context(|| format!("loading schemas from {}", dir.display()))
}

fn corpus(path: &Path, schemas: Option<&SchemaRegistry>) -> anyhow::Result<Vec<Sentence>> {
    let loaded = load_corpus(path, schemas, LoadMode::Strict).with_context(|| format!("loading {}", path.display()))?;
    Ok(loaded.sentences)
}

fn template(args: &TemplateArgs) -> anyhow::Result<PromptTemplate> {
    match &args.template {
        Some(p) => Ok(PromptTemplate::from_file(p, args.strategy)?),
        None => Ok(PromptTemplate::builtin(args.strategy)),
    }
}

fn write_json_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

type Key = (String, String);

fn key(s: &Sentence) -> Key {
    (s.dataset.clone(), s.id.clone())
}

pub fn validate(a: &ValidateArgs) -> anyhow::Result<()> {
    let reg = schemas(&a.schemas)?;
    let loaded = load_corpus(&a.corpus, Some(&reg), LoadMode::Lenient)?;
    #[derive(Serialize)]
    struct Issue<'a> {
        line: usize,
        reason: &'a str,
    }
    for s in &loaded.skipped {
        println!("{}", serde_json::to_string(&Issue { line: s.line, reason: &s.reason })?);
    }
    let entities: usize = loaded.sentences.iter().map(|s| s.entities.len()).sum();
    eprintln!(
        "{} valid sentences, {entities} entities, {} invalid records",
        loaded.sentences.len(),
        loaded.skipped.len()
    );
    if !loaded.skipped.is_empty() {
        bail!("{} invalid records in {}", loaded.skipped.len(), a.corpus.display());
    }
    Ok(())
}

pub fn build_prompts(a: &BuildPromptsArgs) -> anyhow::Result<()> {
    let reg = schemas(&a.schemas)?;
    let tmpl = template(&a.template)?;
    let mut all = Vec::new();
    for p in &a.corpus {
        all.extend(corpus(p, Some(&reg))?);
    }
    let sentences = if a.mix {
        let mut by_dataset: BTreeMap<String, Vec<Sentence>> = BTreeMap::new();
        for s in all {
            by_dataset.entry(s.dataset.clone()).or_default().push(s);
        }
        mix_datasets(&by_dataset, a.seed)
    } else {
        all
    };
    let set = build_training_set(&sentences, &reg, &tmpl, ExecMode::default());
    emit_finetune_file(&set.records, &a.output)?;
    for (id, reason) in &set.skipped {
        eprintln!("{}", serde_json::json!({ "id": id, "skipped": reason }));
    }
    println!("wrote {} records to {} ({} skipped)", set.records.len(), a.output.display(), set.skipped.len());
    Ok(())
}

/// One line of the raw-outputs file.
#[derive(Debug, Serialize, Deserialize)]
pub struct RawOutput {
    pub prompt_id: usize,
    pub dataset: String,
    pub id: String,
    pub strategy: Strategy,
    pub output: Option<String>,
    pub error: Option<String>,
}

fn wire_backend(w: &WireArgs) -> anyhow::Result<WireBackend> {
    let Some(endpoint) = &w.endpoint else {
        return Err(UsageError("the wire backend needs --endpoint".into()).into());
    };
    let mut cfg = WireConfig::new(endpoint.clone(), w.model.clone());
    cfg.timeout = Duration::from_secs(w.timeout);
    cfg.api_key_env = w.api_key_env.clone();
    Ok(WireBackend::new(cfg)?)
}

fn retry(retries: u32) -> RetryPolicy {
    RetryPolicy { max_retries: retries, ..RetryPolicy::default() }
}

pub fn infer(a: &InferArgs) -> anyhow::Result<()> {
    let reg = schemas(&a.schemas)?;
    let tmpl = template(&a.template)?;
    let sentences = corpus(&a.corpus, Some(&reg))?;
    if !(0.0..=1.0).contains(&a.noise_rate) {
        return Err(UsageError(format!("--noise-rate {} is outside [0, 1]", a.noise_rate)).into());
    }
    if a.max_output_chars == 0 {
        return Err(UsageError("--max-output-chars must be positive".into()).into());
    }
    let backend: Box<dyn Backend> = match a.backend {
        GenBackend::EchoGold => Box::new(EchoGoldBackend::new(&sentences, &reg, &tmpl)),
        GenBackend::Perturb => Box::new(PerturbingBackend::new(
            EchoGoldBackend::new(&sentences, &reg, &tmpl),
            a.noise_rate,
            a.seed,
            tmpl.strategy,
        )),
        GenBackend::Wire => Box::new(wire_backend(&a.wire)?),
    };
    let mut requests = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let prompt = render_prompt(s, &reg[&s.dataset], &tmpl)?;
        let mut r = GenerationRequest::new(i as u64, prompt);
        r.temperature = a.temperature;
        r.max_output_chars = a.max_output_chars;
        requests.push(r);
    }
    let opts = BatchOptions { parallelism: a.pool.parallelism as usize, retry: retry(a.pool.retries) };
    let results = run_batch(&requests, backend.as_ref(), &opts);
    let failures = results.iter().filter(|r| r.is_err()).count();
    let records = sentences.iter().zip(results).enumerate().map(|(i, (s, r))| {
        let (output, error) = match r {
            Ok(o) => (Some(o), None),
            Err(e) => (None, Some(e.to_string())),
        };
        RawOutput { prompt_id: i, dataset: s.dataset.clone(), id: s.id.clone(), strategy: tmpl.strategy, output, error }
    });
    write_json_lines(&a.output, records)?;
    println!(
        "wrote {} outputs from {} to {} ({failures} failed)",
        sentences.len(),
        backend.name(),
        a.output.display()
    );
    Ok(())
}

pub fn decode(a: &DecodeArgs) -> anyhow::Result<()> {
    let reg = schemas(&a.schemas)?;
    let gold = corpus(&a.corpus, Some(&reg))?;
    let index: HashMap<Key, &Sentence> = gold.iter().map(|s| (key(s), s)).collect();
    let raw: Vec<RawOutput> = read_json_lines(&a.raw)?;
    let opts = DecodeOptions { max_edit_ratio: a.max_edit_ratio };

    let mut sources = Vec::with_capacity(raw.len());
    let mut jobs = Vec::with_capacity(raw.len());
    for r in &raw {
        let Some(src) = index.get(&(r.dataset.clone(), r.id.clone())) else {
            bail!("raw output {} refers to unknown sentence {}/{}", r.prompt_id, r.dataset, r.id);
        };
        sources.push(*src);
        if let Some(output) = &r.output {
            let strategy = a.strategy.unwrap_or(r.strategy);
            jobs.push(DecodeJob { strategy, payload: output, schema: &reg[&src.dataset], source: src });
        }
    }
    let mut outcomes = decode_batch(&jobs, &opts, ExecMode::default()).into_iter();

    let mut predictions = Vec::with_capacity(raw.len());
    let mut diag_lines = Vec::new();
    let mut kinds: BTreeMap<DiagnosticKind, usize> = BTreeMap::new();
    let (mut failed, mut missing) = (0, 0);
    for (r, src) in raw.iter().zip(sources) {
        let mut pred = Sentence::new(src.id.clone(), src.dataset.clone(), src.language, src.text.clone());
        if r.output.is_none() {
            missing += 1;
            predictions.push(pred);
            continue;
        }
        let outcome = outcomes.next().expect("one outcome per output");
        if outcome.failed {
            failed += 1;
        }
        for d in &outcome.diagnostics {
            *kinds.entry(d.kind).or_default() += 1;
            diag_lines.push(serde_json::json!({
                "dataset": src.dataset, "id": src.id, "severity": d.severity, "kind": d.kind, "message": d.message,
            }));
        }
        pred.entities = outcome.entities;
        predictions.push(pred);
    }
    write_corpus(&predictions, &a.output)?;
    if let Some(p) = &a.diagnostics {
        write_json_lines(p, &diag_lines)?;
    }
    let entities: usize = predictions.iter().map(|s| s.entities.len()).sum();
    println!(
        "decoded {} outputs: {entities} entities, {failed} unparseable, {missing} without output",
        raw.len()
    );
    for (k, n) in kinds {
        println!("  {:<20} {n}", serde_json::to_value(k)?.as_str().unwrap_or_default());
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let gold = corpus(&a.corpus, None)?;
    let preds = corpus(&a.predictions, None)?;
    let mut by_key: HashMap<Key, &Sentence> = HashMap::with_capacity(preds.len());
    for p in &preds {
        if by_key.insert(key(p), p).is_some() {
            bail!("duplicate prediction for {}/{}", p.dataset, p.id);
        }
    }
    let mut pairs = Vec::with_capacity(gold.len());
    for g in &gold {
        let entities = match by_key.remove(&key(g)) {
            Some(p) if p.text != g.text => bail!("prediction text for {}/{} differs from gold", g.dataset, g.id),
            Some(p) => &p.entities[..],
            None => {
                log::warn!("no prediction for {}/{}", g.dataset, g.id);
                &[]
            }
        };
        pairs.push(Prediction { gold: g, entities });
    }
    if let Some((d, id)) = by_key.keys().min() {
        bail!("prediction for {d}/{id} has no gold sentence");
    }
    let measure = match a.measure {
        Measure::MaxOffset => DeviationMeasure::MaxBoundaryOffset,
        Measure::LengthDiff => DeviationMeasure::LengthDifference,
    };
    let report = evaluate_corpus(&pairs, measure, ExecMode::default())?;
    if !report.conservation_holds() {
        bail!("error taxonomy counts do not add up");
    }
    print!("{}", render_report(&report, ReportFormat::Text));
    if let Some(p) = &a.report {
        fs::write(p, render_report(&report, ReportFormat::Machine)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn gen_selector_data(a: &GenSelectorArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.neg_ratio) {
        return Err(UsageError(format!("--neg-ratio {} is outside [0, 1]", a.neg_ratio)).into());
    }
    let reg = schemas(&a.schemas)?;
    let sentences = corpus(&a.corpus, Some(&reg))?;
    let opts = SampleOptions { seed: a.seed, total: a.total, neg_ratio: a.neg_ratio, markers: Markers::default() };
    let samples = gen_selector_dataset(&sentences, &reg, &opts)?;
    emit_selector_file(&samples, &a.output)?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} samples to {} ({positives} positive, {} negative)",
        samples.len(),
        a.output.display(),
        samples.len() - positives
    );
    Ok(())
}

pub fn select(a: &SelectArgs) -> anyhow::Result<()> {
    let preds = corpus(&a.predictions, None)?;
    let markers = Markers::default();
    let backend: Box<dyn SelectorBackend> = match a.backend {
        SelectBackend::GoldOracle => {
            let Some(path) = &a.corpus else {
                return Err(UsageError("the gold-oracle backend needs --corpus".into()).into());
            };
            Box::new(GoldOracleSelector::new(&corpus(path, None)?, &markers))
        }
        SelectBackend::Constant => Box::new(ConstantSelector(a.score)),
        SelectBackend::Wire => Box::new(GenerativeSelector::new(wire_backend(&a.wire)?)),
    };
    let inputs: Vec<(&Sentence, &[_])> = preds.iter().map(|s| (s, &s.entities[..])).collect();
    let opts = FilterOptions {
        threshold: a.threshold,
        markers,
        parallelism: a.pool.parallelism as usize,
        retry: retry(a.pool.retries),
    };
    let out = filter_predictions(&inputs, backend.as_ref(), &opts);
    let filtered: Vec<Sentence> = preds
        .iter()
        .zip(out.kept)
        .map(|(s, kept)| Sentence { entities: kept, ..s.clone() })
        .collect();
    write_corpus(&filtered, &a.output)?;
    if let Some(p) = &a.audit {
        write_json_lines(p, &out.audit)?;
    }
    let before: usize = preds.iter().map(|s| s.entities.len()).sum();
    let after: usize = filtered.iter().map(|s| s.entities.len()).sum();
    let unscored = out.audit.iter().filter(|r| r.error.is_some()).count();
    println!("kept {after} of {before} candidates ({unscored} unscored and kept)");
    Ok(())
}

