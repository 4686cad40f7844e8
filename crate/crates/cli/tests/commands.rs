use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use xcsrl::corpus::{Dataset, Frame, Sample};
use xcsrl::synthetic::{toy_csrl, toy_dialogues, toy_parallel, toy_srl};
use xcsrl::{Block, Checkpoint};

const SMALL: [&str; 16] = [
    "--set", "lm_hidden=16", "--set", "lm_ffn=32", "--set", "hidden=16", "--set", "ffn=32",
    "--set", "heads=2", "--set", "batch_size=4", "--set", "max_steps=6", "--set", "max_epochs=2",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xcsrl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_dataset(path: &Path, data: &Dataset) {
    let lines: Vec<String> = data.samples.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let f = Fixture { dir };
        let parallel: Vec<String> = toy_parallel(30, 1).iter().map(|p| format!("{}\t{}", p.source, p.target)).collect();
        fs::write(f.path("parallel.tsv"), parallel.join("\n")).unwrap();
        let dialogues = Dataset {
            samples: toy_dialogues(12, 2).into_iter().map(|d| Sample { dialogue: d, frames: vec![] }).collect(),
        };
        write_dataset(&f.path("dialogues.jsonl"), &dialogues);
        let srl: Vec<String> = toy_srl(20, 3)
            .iter()
            .map(|s| {
                let f = &s.frames[0];
                serde_json::json!({
                    "tokens": s.dialogue.utterances[0].tokens,
                    "predicate": {"start": f.predicate.start, "end": f.predicate.end},
                    "arguments": f.arguments.iter().map(|a| serde_json::json!({
                        "start": a.span.start, "end": a.span.end, "role": a.role
                    })).collect::<Vec<_>>(),
                })
                .to_string()
            })
            .collect();
        fs::write(f.path("srl.jsonl"), srl.join("\n")).unwrap();
        write_dataset(&f.path("train.jsonl"), &toy_csrl(8, 10, 4));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn pretrain(&self, stage: &str, init: Option<&str>, out: &str, extra: &[&str]) -> Output {
        let (p, d, s, o) = (self.arg("parallel.tsv"), self.arg("dialogues.jsonl"), self.arg("srl.jsonl"), self.arg(out));
        let mut args = vec!["pretrain", "--stage", stage, "--parallel", &p, "--dialogues", &d, "--srl", &s, "--out", &o];
        let init_path = init.map(|i| self.arg(i));
        if let Some(i) = &init_path {
            args.extend(["--init", i.as_str()]);
        }
        args.extend(SMALL);
        args.extend(extra);
        run(&args)
    }

    fn train(&self, data: &str, init: Option<&str>, out: &str, extra: &[&str]) -> Output {
        let (d, o) = (self.arg(data), self.arg(out));
        let mut args = vec!["train", "--data", &d, "--out", &o];
        let init_path = init.map(|i| self.arg(i));
        if let Some(i) = &init_path {
            args.extend(["--init", i.as_str()]);
        }
        args.extend(SMALL);
        args.extend(extra);
        run(&args)
    }
}

const HAND: &str = r#"{"id":"d1","language":"en","utterances":[{"speaker":"A","turn":1,"tokens":["have","you","seen","titanic"]},{"speaker":"B","turn":2,"tokens":["yes","I","have"]},{"speaker":"A","turn":3,"tokens":["did","you","like","it"]}],"frames":[{"predicate":{"utt":2,"start":2,"end":2},"arguments":[{"utt":2,"start":1,"end":1,"role":"ARG0"},{"utt":0,"start":3,"end":3,"role":"ARG1"}]}]}"#;

#[test]
fn stats_reports_hand_counts() {
    let f = Fixture::new();
    fs::write(f.path("hand.jsonl"), HAND).unwrap();
    let out = run(&["stats", &f.arg("hand.jsonl"), "--format", "json"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    // 3 utterances of 4, 3 and 4 tokens; one of two arguments crosses turns
    assert_eq!(v["dialogues"], 1);
    assert_eq!(v["utterances"], 3);
    assert_eq!(v["predicates"], 1);
    assert!((v["tokens_per_utterance"].as_f64().unwrap() - 11.0 / 3.0).abs() < 1e-12);
    assert_eq!(v["cross_ratio"], 0.5);
    let text = stdout(&run(&["stats", &f.arg("hand.jsonl")]));
    assert!(text.contains("cross ratio           50.00%"), "{text}");
}

#[test]
fn stats_empty_and_missing_files() {
    let f = Fixture::new();
    fs::write(f.path("empty.jsonl"), "").unwrap();
    let out = run(&["stats", &f.arg("empty.jsonl"), "--format", "json"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["dialogues"], 0);
    assert_eq!(v["cross_ratio"], 0.0);
    assert_eq!(code(&run(&["stats", &f.arg("missing.jsonl")])), 2);
}

#[test]
fn pretrain_stages_in_order() {
    let f = Fixture::new();
    let out = f.pretrain("sc", None, "sc.ck", &[]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let out = f.pretrain("clm", None, "clm.ck", &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let clm = Checkpoint::load(f.path("clm.ck")).unwrap();
    assert!(clm.block(Block::Backbone).is_some_and(|b| !b.params.is_empty()));

    // pa directly after clm skips sc
    assert_eq!(code(&f.pretrain("pa", Some("clm.ck"), "pa.ck", &[])), 3);

    let out = f.pretrain("sc", Some("clm.ck"), "sc.ck", &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sc = Checkpoint::load(f.path("sc.ck")).unwrap();
    assert_eq!(sc.digest_of(Block::Backbone), clm.digest_of(Block::Backbone));
}

#[test]
fn end2end_pretraining_runs_every_objective() {
    let f = Fixture::new();
    let out = f.pretrain("clm", None, "joint.ck", &["--end2end"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for objective in ["tlm", "hpsi", "spi", "uor", "sai"] {
        assert!(text.contains(objective), "{objective} missing from {text}");
    }
}

#[test]
fn freeze_lm_keeps_backbone() {
    let f = Fixture::new();
    assert_eq!(code(&f.pretrain("clm", None, "clm.ck", &[])), 0);
    let out = f.train("train.jsonl", Some("clm.ck"), "tuned.ck", &["--freeze-lm"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let before = Checkpoint::load(f.path("clm.ck")).unwrap();
    let after = Checkpoint::load(f.path("tuned.ck")).unwrap();
    assert_eq!(after.digest_of(Block::Backbone), before.digest_of(Block::Backbone));
    assert_ne!(after.digest_of(Block::Pa), before.digest_of(Block::Pa));
}

#[test]
fn invalid_label_is_a_data_error() {
    let f = Fixture::new();
    let mut data = toy_csrl(4, 4, 5);
    data.samples[0].frames[0].arguments[0].role = "ARG-BOGUS".into();
    write_dataset(&f.path("bad.jsonl"), &data);
    let out = f.train("bad.jsonl", None, "bad.ck", &[]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.path("bad.ck").exists());
    // declaring the role makes it trainable
    let out = f.train("bad.jsonl", None, "ok.ck", &["--roles", "ARG-BOGUS"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

/// Rebuilds the dataset with the predicted frames as gold annotations.
fn as_gold(data: &Dataset, predicted: &str) -> Dataset {
    let mut by_id: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    for line in predicted.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = v["dialogue"].as_str().unwrap().to_string();
        let frame: Frame = serde_json::from_value(v).unwrap();
        by_id.entry(id).or_default().push(frame);
    }
    Dataset {
        samples: data
            .samples
            .iter()
            .map(|s| Sample { dialogue: s.dialogue.clone(), frames: by_id.remove(&s.dialogue.id).unwrap_or_default() })
            .collect(),
    }
}

#[test]
fn predict_eval_and_label_mismatch() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("train.jsonl", None, "model.ck", &["--set", "max_epochs=40", "--set", "max_steps=200"])), 0);

    let out = run(&["predict", "--checkpoint", &f.arg("model.ck"), "--data", &f.arg("train.jsonl")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let predicted = stdout(&out);
    let data = toy_csrl(8, 10, 4);
    assert_eq!(predicted.lines().count(), data.frame_count());

    let gold = as_gold(&data, &predicted);
    write_dataset(&f.path("gold.jsonl"), &gold);
    let out = run(&["eval", "--checkpoint", &f.arg("model.ck"), "--data", &f.arg("gold.jsonl"), "--format", "json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(gold.frames().any(|(_, fr)| !fr.arguments.is_empty()));
    assert_eq!(v["f1_all"], 1.0, "{v}");

    let mut extra = data.clone();
    extra.samples[0].frames[0].arguments[0].role = "ARG-NEW".into();
    write_dataset(&f.path("extra.jsonl"), &extra);
    let out = run(&["eval", "--checkpoint", &f.arg("model.ck"), "--data", &f.arg("extra.jsonl")]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runs_are_byte_identical() {
    let f = Fixture::new();
    for name in ["a", "b"] {
        let out = f.train("train.jsonl", None, &format!("{name}.ck"), &["--metrics", &f.arg(&format!("{name}.log"))]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(fs::read(f.path("a.ck")).unwrap(), fs::read(f.path("b.ck")).unwrap());
    let log = fs::read(f.path("a.log")).unwrap();
    assert!(!log.is_empty());
    assert_eq!(log, fs::read(f.path("b.log")).unwrap());
}

#[test]
fn config_file_and_bad_key() {
    let f = Fixture::new();
    fs::write(f.path("run.toml"), "max_epochs = 1\nseed = 9\n").unwrap();
    let out = f.train("train.jsonl", None, "c.ck", &["--config", &f.arg("run.toml")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // command-line overrides win over the file
    assert!(stdout(&out).contains("of 2"), "{}", stdout(&out));
    let out = f.train("train.jsonl", None, "c.ck", &["--set", "nonsense=1"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}
