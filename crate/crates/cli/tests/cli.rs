use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use codesearch::corpus::{CorpusEntry, Language};
use codesearch::encoder::{write_checkpoint, EncoderConfig, EncoderParams};
use codesearch::tokenizer::BpeModel;

const VERBS: [&str; 8] = ["parse", "load", "merge", "sort", "split", "fetch", "write", "check"];
const NOUNS: [&str; 8] = ["json", "image", "graph", "matrix", "socket", "string", "record", "cache"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_codesearch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn entries() -> Vec<CorpusEntry> {
    (0..64)
        .map(|i| {
            let (verb, noun) = (VERBS[i / 8], NOUNS[i % 8]);
            let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
            CorpusEntry {
                id: format!("toy/{verb}_{noun}"),
                language: Language::Python,
                doc_tokens: words(&format!("{verb} the given {noun}")),
                code_tokens: words(&format!("def {verb}_{noun} ( data ) : result = {noun} . {verb} ( data ) return result")),
                raw_doc: None,
                raw_code: None,
            }
        })
        .collect()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    /// Toy corpus in `data/` (test split equals train split) and a run
    /// config tuned to overfit it.
    fn new(lr: f64, epochs: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::create_dir(root.join("data")).unwrap();
        std::fs::create_dir(root.join("out")).unwrap();
        let lines: String = entries().iter().map(|e| e.to_json_line() + "\n").collect();
        std::fs::write(root.join("data/train.jsonl"), &lines).unwrap();
        std::fs::write(root.join("data/test.jsonl"), &lines).unwrap();
        let config = format!(
            "verbosity = 0\n\
             [paths]\ncorpus_dir = \"data\"\nvocab = \"out/vocab.txt\"\ncheckpoint = \"out/model.bin\"\nindex = \"out/index.bin\"\n\
             report = \"out/report.txt\"\nreport_json = \"out/report.json\"\n\
             [model]\ndim = 32\nlayers = 1\nvocab_size = 120\n\
             [train]\nepochs = {epochs}\nbatch_size = 16\nlearning_rate = {lr}\nseed = 1\n\
             [eval]\ncandidates = 64\nseed = 7\nmodel_name = \"toy\"\n"
        );
        std::fs::write(root.join("run.toml"), config).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn cfg(&self) -> String {
        self.path("run.toml").display().to_string()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = run(args);
        assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
        o
    }

    fn prepare(&self) {
        let cfg = self.cfg();
        self.ok(&["tokenize-train", "--config", &cfg]);
        self.ok(&["train", "--config", &cfg]);
        self.ok(&["index", "--config", &cfg]);
    }
}

fn assert_result_lines(text: &str, expected: usize) {
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), expected, "{text}");
    let mut prev = f64::INFINITY;
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert_eq!(fields[0], (i + 1).to_string());
        let (int, frac) = fields[1].split_once('.').expect("decimal score");
        assert!(int.trim_start_matches('-').chars().all(|c| c.is_ascii_digit()));
        assert_eq!(frac.len(), 4, "{line}");
        let score: f64 = fields[1].parse().unwrap();
        assert!(score <= prev && (-1.0..=1.0).contains(&score));
        prev = score;
        assert!(fields[2].starts_with("toy/"));
    }
}

#[test]
fn pipeline_query_and_eval() {
    let ws = Workspace::new(1e-2, 200);
    ws.prepare();
    let idx = ws.path("out/index.bin").display().to_string();
    let ckpt = ws.path("out/model.bin").display().to_string();

    let one = ws.ok(&["query", "--index", &idx, "--checkpoint", &ckpt, "--k", "5", "parse json string"]);
    let one_shot = stdout(&one);
    assert_result_lines(&one_shot, 5);
    assert!(one_shot.lines().next().unwrap().ends_with("\ttoy/parse_json"), "{one_shot}");

    let mut child = bin()
        .args(["query", "--index", &idx, "--checkpoint", &ckpt, "--k", "5"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"parse json string\n\nsort the cache\n").unwrap();
    let looped = child.wait_with_output().unwrap();
    assert!(looped.status.success());
    let text = stdout(&looped);
    assert_result_lines(&text.lines().take(5).collect::<Vec<_>>().join("\n"), 5);
    assert_eq!(text.lines().take(5).collect::<Vec<_>>(), one_shot.lines().collect::<Vec<_>>());
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().nth(5).unwrap().ends_with("\ttoy/sort_cache"));

    let eval = ws.ok(&["eval", "--config", &ws.cfg()]);
    let table = stdout(&eval);
    assert!(table.contains("0.3841"), "{table}");
    let json: codesearch::EvalReport = serde_json::from_str(&std::fs::read_to_string(ws.path("out/report.json")).unwrap()).unwrap();
    assert!(json.mean_ndcg >= 0.95 && json.mean_mrr >= 0.95, "{table}");
    assert_eq!(json.model_name, "toy");
    assert_eq!(std::fs::read_to_string(ws.path("out/report.txt")).unwrap(), table);
}

#[test]
fn zero_learning_rate_checkpoint_equals_initialization() {
    let ws = Workspace::new(0.0, 2);
    let cfg = ws.cfg();
    ws.ok(&["tokenize-train", "--config", &cfg]);
    ws.ok(&["train", "--config", &cfg]);
    let bpe = BpeModel::from_text(&std::fs::read_to_string(ws.path("out/vocab.txt")).unwrap()).unwrap();
    let init = EncoderParams::init(EncoderConfig::new(bpe.vocab_size(), 32, 1), 1);
    assert_eq!(std::fs::read(ws.path("out/model.bin")).unwrap(), write_checkpoint(&init));
}

#[test]
fn fixed_seed_outputs_are_byte_identical() {
    let ws = Workspace::new(1e-2, 3);
    ws.prepare();
    let first: Vec<Vec<u8>> = ["out/vocab.txt", "out/model.bin", "out/index.bin"].iter().map(|p| std::fs::read(ws.path(p)).unwrap()).collect();
    ws.prepare();
    let second: Vec<Vec<u8>> = ["out/vocab.txt", "out/model.bin", "out/index.bin"].iter().map(|p| std::fs::read(ws.path(p)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn flags_override_config() {
    let ws = Workspace::new(1e-2, 1);
    let cfg = ws.cfg();
    ws.ok(&["tokenize-train", "--config", &cfg, "--vocab-size", "90"]);
    let bpe = BpeModel::from_text(&std::fs::read_to_string(ws.path("out/vocab.txt")).unwrap()).unwrap();
    assert!(bpe.vocab_size() <= 90);
    let alt = ws.path("out/alt.bin").display().to_string();
    ws.ok(&["train", "--config", &cfg, "--dim", "8", "--checkpoint", &alt]);
    let params = codesearch::encoder::load_checkpoint(Path::new(&alt), None).unwrap();
    assert_eq!(params.dim(), 8);
    assert!(!ws.path("out/model.bin").exists());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_problems_exit_3() {
    let ws = Workspace::new(1e-2, 1);
    std::fs::write(ws.path("bad.toml"), "[model]\ndim = \"wide\"\n").unwrap();
    let bad = ws.path("bad.toml").display().to_string();
    let o = run(&["train", "--config", &bad]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config message=\""), "{err}");

    let o = run(&["train", "--config", &ws.cfg()]);
    assert_eq!(o.status.code(), Some(3), "missing vocabulary must be caught up front");
    let o = run(&["query", "--index", "/nonexistent/idx.bin", "--checkpoint", "/nonexistent/m.bin", "q"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["train", "--config", &ws.cfg(), "--lr=-1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn runtime_failures_exit_1_with_one_line() {
    let ws = Workspace::new(1e-2, 1);
    ws.prepare();
    let cfg = ws.cfg();

    // A checkpoint trained with another seed makes the index stale.
    let other = ws.path("out/other.bin").display().to_string();
    ws.ok(&["train", "--config", &cfg, "--seed", "99", "--checkpoint", &other]);
    let idx = ws.path("out/index.bin").display().to_string();
    let vocab = ws.path("out/vocab.txt").display().to_string();
    let o = run(&["query", "--index", &idx, "--checkpoint", &other, "--vocab", &vocab, "parse json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=stale_index"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let mut bytes = std::fs::read(ws.path("out/model.bin")).unwrap();
    bytes[20] ^= 1;
    std::fs::write(ws.path("out/model.bin"), bytes).unwrap();
    let o = run(&["eval", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=checkpoint"), "{err}");
    assert!(!ws.path("out/report.json").exists(), "no output on failure");
}
