use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bioner_core::corpus::{write_corpus, write_schema};
use bioner_core::{DatasetSchema, Language, Sentence};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        fs::create_dir(ws.path("schemas")).unwrap();
        let genia = DatasetSchema::new("GENIA", Language::En, &[("DNA", "DNA"), ("Protein", "proteins"), ("RNA", "RNA")]);
        let cmeee = DatasetSchema::new("CMeEE", Language::Zh, &[("dis", "疾病"), ("sym", "症状"), ("dru", "药物")]);
        for s in [&genia, &cmeee] {
            write_schema(s, ws.path(&format!("schemas/{}.json", s.name))).unwrap();
        }
        let en = vec![
            Sentence::new("g1", "GENIA", Language::En, "IL-5 promoter/enhancer-luciferase gene construct")
                .with_entity(0, 48, "DNA")
                .with_entity(0, 4, "Protein")
                .with_entity(23, 33, "Protein"),
            Sentence::new("g2", "GENIA", Language::En, "The NF-kappa B [p50] subunit binds DNA.").with_entity(4, 14, "Protein"),
        ];
        let zh = vec![
            Sentence::new("c1", "CMeEE", Language::Zh, "患者出现发热，服用阿司匹林。").with_entity(4, 6, "sym").with_entity(9, 13, "dru"),
            Sentence::new("c2", "CMeEE", Language::Zh, "无明显异常。"),
        ];
        write_corpus(&en, ws.path("en.jsonl")).unwrap();
        write_corpus(&zh, ws.path("zh.jsonl")).unwrap();
        let all: Vec<Sentence> = en.into_iter().chain(zh).collect();
        write_corpus(&all, ws.path("all.jsonl")).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bioner")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap()
    }
}

fn summary_f1(report: &Path) -> f64 {
    let text = fs::read_to_string(report).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "summary");
    first["f1"].as_f64().unwrap()
}

#[test]
fn validate_accepts_clean_and_rejects_broken_corpora() {
    let ws = Workspace::new();
    ws.ok(&["validate", "--corpus", "all.jsonl", "--schemas", "schemas"]);
    let bad = r#"{"id":"x","dataset":"GENIA","language":"en","text":"abc","entities":[{"start":0,"end":2,"type":"Protein","text":"xy"}]}"#;
    fs::write(ws.path("bad.jsonl"), format!("{}\n{bad}\n", ws.read("en.jsonl").lines().next().unwrap())).unwrap();
    let out = ws.run(&["validate", "--corpus", "bad.jsonl", "--schemas", "schemas"]);
    assert_eq!(out.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_slice(out.stdout.split(|b| *b == b'\n').next().unwrap()).unwrap();
    assert_eq!(line["line"], 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["evaluate"]).status.code(), Some(2));
    let out = ws.run(&["infer", "--corpus", "all.jsonl", "--schemas", "schemas", "--backend", "wire", "-o", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(ws.run(&["validate", "--corpus", "missing.jsonl", "--schemas", "schemas"]).status.code(), Some(1));
}

#[test]
fn echo_gold_pipeline_for_every_strategy() {
    let ws = Workspace::new();
    for strategy in ["symbolic", "json", "html"] {
        ws.ok(&["build-prompts", "--corpus", "en.jsonl", "--corpus", "zh.jsonl", "--schemas", "schemas", "--strategy", strategy, "--mix", "--seed", "3", "-o", "ft.jsonl"]);
        assert_eq!(ws.read("ft.jsonl").lines().count(), 4);
        ws.ok(&["infer", "--corpus", "all.jsonl", "--schemas", "schemas", "--strategy", strategy, "-o", "raw.jsonl"]);
        ws.ok(&["decode", "--raw", "raw.jsonl", "--corpus", "all.jsonl", "--schemas", "schemas", "-o", "pred.jsonl"]);
        let text = ws.ok(&["evaluate", "--predictions", "pred.jsonl", "--corpus", "all.jsonl", "--report", "rep.jsonl"]);
        assert!(text.contains("overall"));
        assert_eq!(summary_f1(&ws.path("rep.jsonl")), 1.0, "{strategy}");
    }
}

#[test]
fn mixed_prompts_alternate_languages() {
    let ws = Workspace::new();
    ws.ok(&["build-prompts", "--corpus", "en.jsonl", "--corpus", "zh.jsonl", "--schemas", "schemas", "--mix", "-o", "ft.jsonl"]);
    let langs: Vec<String> = ws
        .read("ft.jsonl")
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["meta"]["language"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(langs, ["zh", "en", "zh", "en"]);
}

#[test]
fn reruns_are_byte_identical() {
    let ws = Workspace::new();
    let run = |suffix: &str| {
        ws.ok(&["infer", "--corpus", "all.jsonl", "--schemas", "schemas", "--backend", "perturb", "--noise-rate", "0.1", "--seed", "5", "-o", &format!("raw{suffix}")]);
        ws.ok(&["gen-selector-data", "--corpus", "all.jsonl", "--schemas", "schemas", "--total", "50", "--seed", "5", "-o", &format!("sel{suffix}")]);
    };
    run("a");
    run("b");
    assert_eq!(ws.read("rawa"), ws.read("rawb"));
    assert_eq!(ws.read("sela"), ws.read("selb"));
    assert_eq!(ws.read("sela").lines().count(), 50);
}

#[test]
fn disjoint_predictions_are_all_spurious() {
    let ws = Workspace::new();
    let pred = Sentence::new("c2", "CMeEE", Language::Zh, "无明显异常。").with_entity(1, 3, "sym");
    let gold = Sentence::new("c2", "CMeEE", Language::Zh, "无明显异常。");
    write_corpus(&[pred], ws.path("p.jsonl")).unwrap();
    write_corpus(&[gold], ws.path("g.jsonl")).unwrap();
    ws.ok(&["evaluate", "--predictions", "p.jsonl", "--corpus", "g.jsonl", "--report", "rep.jsonl"]);
    let errors = ws.read("rep.jsonl").lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()).find(|v| v["kind"] == "errors").unwrap();
    assert_eq!(errors["spurious"], 1);
    assert_eq!(errors["type_error"], 0);
    assert_eq!(summary_f1(&ws.path("rep.jsonl")), 0.0);
}

#[test]
fn select_with_gold_oracle_removes_noise() {
    let ws = Workspace::new();
    let noisy = vec![
        Sentence::new("g2", "GENIA", Language::En, "The NF-kappa B [p50] subunit binds DNA.")
            .with_entity(4, 14, "Protein")
            .with_entity(16, 19, "Protein")
            .with_entity(35, 38, "DNA"),
    ];
    write_corpus(&noisy, ws.path("noisy.jsonl")).unwrap();
    let out = ws.ok(&["select", "--predictions", "noisy.jsonl", "--corpus", "all.jsonl", "-o", "kept.jsonl", "--audit", "audit.jsonl"]);
    assert!(out.contains("kept 1 of 3"));
    let kept: serde_json::Value = serde_json::from_str(ws.read("kept.jsonl").trim()).unwrap();
    assert_eq!(kept["entities"].as_array().unwrap().len(), 1);
    assert_eq!(ws.read("audit.jsonl").lines().count(), 3);

    let out = ws.run(&["select", "--predictions", "noisy.jsonl", "-o", "kept.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_flags() {
    let ws = Workspace::new();
    fs::write(ws.path("run.toml"), "schemas = \"schemas\"\ncorpus = \"all.jsonl\"\n\n[infer]\nbackend = \"echo-gold\"\nstrategy = \"json\"\n").unwrap();
    ws.ok(&["--config", "run.toml", "infer", "-o", "raw.jsonl"]);
    let first: serde_json::Value = serde_json::from_str(ws.read("raw.jsonl").lines().next().unwrap()).unwrap();
    assert_eq!(first["strategy"], "json");
    ws.ok(&["infer", "--config", "run.toml", "--strategy", "html", "-o", "raw.jsonl"]);
    let first: serde_json::Value = serde_json::from_str(ws.read("raw.jsonl").lines().next().unwrap()).unwrap();
    assert_eq!(first["strategy"], "html");
}
