//! `codesearch` command-line driver.

mod config;

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codesearch::corpus::{load_split, split_path, CorpusSplit, LoadOptions, Partition};
use codesearch::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, EncoderParams};
use codesearch::eval::evaluate;
use codesearch::index::{build_index, encode_query, load_index, save_index, EmbeddingIndex, IndexError};
use codesearch::io_util::write_atomic;
use codesearch::tokenizer::{subtoken_counts, BpeModel, Tokenizer};
use codesearch::training::{encode_pairs, train, LossKind};

use config::{existing_file, required, writable_target, RunConfig};

/// Failure with a category that determines the exit status.
#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: "config", message: message.into() }
    }

    fn runtime(kind: &'static str, err: impl std::fmt::Display) -> Self {
        Self { kind, message: err.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            "config" => 3,
            _ => 1,
        }
    }

    /// `error kind=<kind> message=<json string>` on a single line.
    fn line(&self) -> String {
        let escaped: String = self
            .message
            .chars()
            .flat_map(|c| match c {
                '"' => vec!['\\', '"'],
                '\\' => vec!['\\', '\\'],
                '\n' => vec!['\\', 'n'],
                '\t' => vec!['\\', 't'],
                c => vec![c],
            })
            .collect();
        format!("error kind={} message=\"{escaped}\"", self.kind)
    }
}

#[derive(Parser, Debug)]
#[command(name = "codesearch", version, about = "Semantic code search: train, index, query and evaluate")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More progress output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Suppress progress output.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a BPE vocabulary from the training split.
    TokenizeTrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Train encoder parameters on the training split.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Embed every snippet of a split into an index file.
    Index {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Split to index: train, valid or test.
        #[arg(long)]
        partition: Option<Partition>,
    },
    /// Top-k snippets for a query; reads one query per stdin line when no
    /// query is given.
    Query {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to vocab.txt next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        query: Option<String>,
    },
    /// NDCG and MRR per language against an index.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        partition: Option<Partition>,
        /// Candidates per query, the relevant snippet included.
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cutoff: Option<usize>,
        /// Write the text table here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// margin or in-batch-softmax.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable hardest-in-batch negatives.
    #[arg(long)]
    no_hard_mining: bool,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "margin" => Ok(LossKind::Margin),
        "in-batch-softmax" | "in_batch_softmax" | "softmax" => Ok(LossKind::InBatchSoftmax),
        _ => Err(format!("unknown loss {s:?}; expected margin or in-batch-softmax")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if cli.quiet {
        cfg.verbosity = 0;
    } else if cli.verbose > 0 {
        cfg.verbosity = 1 + cli.verbose;
    }

    match cli.command {
        Command::TokenizeTrain { corpus, vocab, vocab_size } => {
            set_path(&mut cfg.corpus_dir, corpus);
            set_path(&mut cfg.vocab, vocab);
            set(&mut cfg.vocab_size, vocab_size);
            cfg.validate()?;
            tokenize_train(&cfg)
        }
        Command::Train { corpus, vocab, checkpoint, model, train } => {
            set_path(&mut cfg.corpus_dir, corpus);
            set_path(&mut cfg.vocab, vocab);
            set_path(&mut cfg.checkpoint, checkpoint);
            set(&mut cfg.dim, model.dim);
            set(&mut cfg.layers, model.layers);
            let t = &mut cfg.train;
            set(&mut t.epochs, train.epochs);
            set(&mut t.batch_size, train.batch_size);
            set(&mut t.learning_rate, train.lr);
            set(&mut t.margin, train.margin);
            set(&mut t.loss, train.loss);
            set(&mut t.temperature, train.temperature);
            set(&mut t.seed, train.seed);
            if train.no_hard_mining {
                t.hard_mining = false;
            }
            cfg.validate()?;
            run_train(&cfg)
        }
        Command::Index { corpus, vocab, checkpoint, index, partition } => {
            set_path(&mut cfg.corpus_dir, corpus);
            set_path(&mut cfg.vocab, vocab);
            set_path(&mut cfg.checkpoint, checkpoint);
            set_path(&mut cfg.index, index);
            set(&mut cfg.index_partition, partition);
            cfg.validate()?;
            run_index(&cfg)
        }
        Command::Query { index, checkpoint, vocab, k, query } => {
            set_path(&mut cfg.index, index);
            set_path(&mut cfg.checkpoint, checkpoint);
            set_path(&mut cfg.vocab, vocab);
            if k == 0 {
                return Err(CliError::config("--k must be at least 1"));
            }
            cfg.validate()?;
            run_query(&cfg, k, query)
        }
        Command::Eval { corpus, vocab, checkpoint, index, partition, candidates, seed, cutoff, report, json } => {
            set_path(&mut cfg.corpus_dir, corpus);
            set_path(&mut cfg.vocab, vocab);
            set_path(&mut cfg.checkpoint, checkpoint);
            set_path(&mut cfg.index, index);
            set_path(&mut cfg.report, report);
            set_path(&mut cfg.report_json, json);
            set(&mut cfg.eval_partition, partition);
            set(&mut cfg.eval.candidates, candidates);
            set(&mut cfg.eval.seed, seed);
            if cutoff.is_some() {
                cfg.eval.cutoff = cutoff;
            }
            cfg.validate()?;
            run_eval(&cfg)
        }
    }
}

fn progress(cfg: &RunConfig, message: impl AsRef<str>) {
    if cfg.verbosity > 0 {
        eprintln!("{}", message.as_ref());
    }
}

/// Locates a split file inside the corpus directory without reading it.
fn corpus_file(cfg: &RunConfig, partition: Partition) -> Result<PathBuf, CliError> {
    let dir = required(&cfg.corpus_dir, "--corpus", "corpus_dir")?;
    if !dir.is_dir() {
        return Err(CliError::config(format!("corpus directory {} does not exist", dir.display())));
    }
    split_path(dir, partition)
        .ok_or_else(|| CliError::config(format!("no {partition}.jsonl or {partition}.jsonl.gz in {}", dir.display())))
}

fn load_corpus(cfg: &RunConfig, path: &Path, partition: Partition) -> Result<CorpusSplit, CliError> {
    let report = load_split(path, partition, &load_options(cfg)).map_err(|e| CliError::runtime("corpus", e))?;
    for w in &report.warnings {
        progress(cfg, format!("warning: {w}"));
    }
    if !report.rejected.is_empty() {
        progress(cfg, format!("{}: skipped {} of {} lines", path.display(), report.rejected.len(), report.total_lines));
        if cfg.verbosity > 1 {
            for r in &report.rejected {
                eprintln!("  line {}: {}", r.line, r.reason);
            }
        }
    }
    Ok(report.split)
}

fn load_options(cfg: &RunConfig) -> LoadOptions {
    let mut opts = LoadOptions::default();
    set(&mut opts.max_doc_tokens, cfg.max_doc_tokens);
    set(&mut opts.max_code_tokens, cfg.max_code_tokens);
    opts
}

fn load_tokenizer(cfg: &RunConfig, path: &Path) -> Result<Tokenizer, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
    let bpe = BpeModel::from_text(&text).map_err(|e| CliError::runtime("tokenizer", format!("{}: {e}", path.display())))?;
    let mut tok = Tokenizer::new(bpe);
    set(&mut tok.max_doc_tokens, cfg.max_doc_tokens);
    set(&mut tok.max_code_tokens, cfg.max_code_tokens);
    Ok(tok)
}

fn load_model(path: &Path, tok: &Tokenizer) -> Result<EncoderParams, CliError> {
    let params = load_checkpoint(path, None).map_err(|e| CliError::runtime("checkpoint", format!("{}: {e}", path.display())))?;
    if params.config().vocab_size != tok.vocab_size() {
        return Err(CliError::runtime(
            "checkpoint",
            format!("checkpoint vocabulary {} does not match tokenizer vocabulary {}", params.config().vocab_size, tok.vocab_size()),
        ));
    }
    Ok(params)
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
}

fn tokenize_train(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = corpus_file(cfg, Partition::Train)?;
    let out = required(&cfg.vocab, "--vocab", "vocab")?;
    writable_target(out, "vocabulary")?;

    let split = load_corpus(cfg, &corpus, Partition::Train)?;
    let bpe = BpeModel::train_from_counts(&subtoken_counts(&split), cfg.vocab_size).map_err(|e| CliError::runtime("tokenizer", e))?;
    write_output(out, bpe.to_text().as_bytes())?;
    progress(cfg, format!("vocabulary {} entries, {} merges -> {}", bpe.vocab_size(), bpe.merges().len(), out.display()));
    Ok(())
}

fn run_train(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = corpus_file(cfg, Partition::Train)?;
    let vocab = required(&cfg.vocab, "--vocab", "vocab")?;
    existing_file(vocab, "vocabulary")?;
    let out = required(&cfg.checkpoint, "--checkpoint", "checkpoint")?;
    writable_target(out, "checkpoint")?;

    let tok = load_tokenizer(cfg, vocab)?;
    let split = load_corpus(cfg, &corpus, Partition::Train)?;
    let (pairs, skipped) = encode_pairs(&split, &tok);
    if !skipped.is_empty() {
        progress(cfg, format!("skipped {} entries that tokenize to nothing", skipped.len()));
    }
    let init = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), cfg.dim, cfg.layers), cfg.train.seed);
    progress(cfg, format!("training on {} pairs, d={} L={}", pairs.len(), cfg.dim, cfg.layers));
    let outcome = train(&cfg.train, &pairs, init, |report, _| {
        progress(cfg, report.to_string());
        Ok(())
    })
    .map_err(|e| CliError::runtime("train", e))?;
    save_checkpoint(&outcome.params, out).map_err(|e| CliError::runtime("checkpoint", e))?;
    progress(cfg, format!("checkpoint -> {}", out.display()));
    Ok(())
}

fn run_index(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = corpus_file(cfg, cfg.index_partition)?;
    let vocab = required(&cfg.vocab, "--vocab", "vocab")?;
    existing_file(vocab, "vocabulary")?;
    let ckpt = required(&cfg.checkpoint, "--checkpoint", "checkpoint")?;
    existing_file(ckpt, "checkpoint")?;
    let out = required(&cfg.index, "--index", "index")?;
    writable_target(out, "index")?;

    let tok = load_tokenizer(cfg, vocab)?;
    let params = load_model(ckpt, &tok)?;
    let split = load_corpus(cfg, &corpus, cfg.index_partition)?;
    let built = build_index(&split, &params, &tok).map_err(|e| CliError::runtime("index", e))?;
    if !built.skipped.is_empty() {
        progress(cfg, format!("skipped {} snippets that could not be encoded", built.skipped.len()));
        if cfg.verbosity > 1 {
            for id in &built.skipped {
                eprintln!("  {id}");
            }
        }
    }
    save_index(&built.index, out).map_err(|e| CliError::runtime("index", e))?;
    progress(cfg, format!("indexed {} snippets -> {}", built.index.len(), out.display()));
    Ok(())
}

fn default_vocab(cfg: &RunConfig, ckpt: &Path) -> PathBuf {
    cfg.vocab.clone().unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"))
}

fn print_results(out: &mut impl Write, query: &str, index: &EmbeddingIndex, params: &EncoderParams, tok: &Tokenizer, k: usize) -> Result<(), CliError> {
    let q = encode_query(query, params, tok).map_err(|e| CliError::runtime("query", e))?;
    let results = index.search_vector(&q, k).map_err(|e| CliError::runtime("query", e))?;
    for r in results {
        writeln!(out, "{}\t{:.4}\t{}", r.rank, r.score, r.id).map_err(|e| CliError::runtime("io", e))?;
    }
    Ok(())
}

fn run_query(cfg: &RunConfig, k: usize, query: Option<String>) -> Result<(), CliError> {
    let idx_path = required(&cfg.index, "--index", "index")?;
    existing_file(idx_path, "index")?;
    let ckpt = required(&cfg.checkpoint, "--checkpoint", "checkpoint")?;
    existing_file(ckpt, "checkpoint")?;
    let vocab = default_vocab(cfg, ckpt);
    existing_file(&vocab, "vocabulary")?;

    let tok = load_tokenizer(cfg, &vocab)?;
    let params = load_model(ckpt, &tok)?;
    let index = load_index(idx_path).map_err(|e| CliError::runtime("index", e))?;
    index.check_model(&params).map_err(|e: IndexError| CliError::runtime("stale_index", e))?;

    let stdout = io::stdout();
    let mut out = stdout.lock();
    if let Some(q) = query {
        return print_results(&mut out, &q, &index, &params, &tok, k);
    }
    let mut failures = 0;
    for line in io::stdin().lock().lines() {
        let line = line.map_err(|e| CliError::runtime("io", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Err(e) = print_results(&mut out, &line, &index, &params, &tok, k) {
            eprintln!("{}", e.line());
            failures += 1;
        }
        out.flush().map_err(|e| CliError::runtime("io", e))?;
    }
    if failures > 0 {
        return Err(CliError::runtime("query", format!("{failures} queries failed")));
    }
    Ok(())
}

fn run_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = corpus_file(cfg, cfg.eval_partition)?;
    let vocab = required(&cfg.vocab, "--vocab", "vocab")?;
    existing_file(vocab, "vocabulary")?;
    let ckpt = required(&cfg.checkpoint, "--checkpoint", "checkpoint")?;
    existing_file(ckpt, "checkpoint")?;
    let idx_path = required(&cfg.index, "--index", "index")?;
    existing_file(idx_path, "index")?;
    for (p, what) in [(&cfg.report, "report"), (&cfg.report_json, "JSON report")] {
        if let Some(p) = p {
            writable_target(p, what)?;
        }
    }

    let tok = load_tokenizer(cfg, vocab)?;
    let params = load_model(ckpt, &tok)?;
    let index = load_index(idx_path).map_err(|e| CliError::runtime("index", e))?;
    let split = load_corpus(cfg, &corpus, cfg.eval_partition)?;
    let report = evaluate(&params, &tok, &index, &split, &cfg.eval).map_err(|e| match e {
        codesearch::EvalError::Index(IndexError::Stale { .. }) => CliError::runtime("stale_index", e),
        e => CliError::runtime("eval", e),
    })?;
    let table = report.to_table();
    print!("{table}");
    if let Some(p) = &cfg.report {
        write_output(p, table.as_bytes())?;
    }
    if let Some(p) = &cfg.report_json {
        write_output(p, (report.to_json() + "\n").as_bytes())?;
    }
    Ok(())
}
