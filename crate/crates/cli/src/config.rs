//! Run configuration: TOML file values overridden by command-line flags.

use std::path::{Path, PathBuf};

use codesearch::corpus::Partition;
use codesearch::eval::EvalConfig;
use codesearch::tokenizer::DEFAULT_VOCAB_SIZE;
use codesearch::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_DIM: usize = 128;
pub const DEFAULT_LAYERS: usize = 1;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    paths: PathsSection,
    model: ModelSection,
    train: TrainConfig,
    index: IndexSection,
    eval: EvalSection,
    verbosity: Option<u8>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PathsSection {
    corpus_dir: Option<PathBuf>,
    vocab: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    index: Option<PathBuf>,
    report: Option<PathBuf>,
    report_json: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    dim: Option<usize>,
    layers: Option<usize>,
    vocab_size: Option<usize>,
    max_doc_tokens: Option<usize>,
    max_code_tokens: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IndexSection {
    partition: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    candidates: Option<usize>,
    seed: Option<u64>,
    cutoff: Option<usize>,
    partition: Option<String>,
    model_name: Option<String>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub corpus_dir: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub dim: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_doc_tokens: Option<usize>,
    pub max_code_tokens: Option<usize>,
    pub train: TrainConfig,
    pub index_partition: Partition,
    pub eval: EvalConfig,
    pub eval_partition: Partition,
    pub verbosity: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            vocab: None,
            checkpoint: None,
            index: None,
            report: None,
            report_json: None,
            dim: DEFAULT_DIM,
            layers: DEFAULT_LAYERS,
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_doc_tokens: None,
            max_code_tokens: None,
            train: TrainConfig::default(),
            index_partition: Partition::Test,
            eval: EvalConfig::default(),
            eval_partition: Partition::Test,
            verbosity: 1,
        }
    }
}

fn partition(value: &str, key: &str) -> Result<Partition, CliError> {
    value.parse().map_err(|_| CliError::config(format!("{key}: unknown partition {value:?}")))
}

impl RunConfig {
    /// Defaults overlaid with the TOML file at `path`. Relative paths in the
    /// file are resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let file: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base.join(p) } else { p });

        let mut cfg = RunConfig::default();
        cfg.corpus_dir = rel(file.paths.corpus_dir);
        cfg.vocab = rel(file.paths.vocab);
        cfg.checkpoint = rel(file.paths.checkpoint);
        cfg.index = rel(file.paths.index);
        cfg.report = rel(file.paths.report);
        cfg.report_json = rel(file.paths.report_json);
        cfg.dim = file.model.dim.unwrap_or(cfg.dim);
        cfg.layers = file.model.layers.unwrap_or(cfg.layers);
        cfg.vocab_size = file.model.vocab_size.unwrap_or(cfg.vocab_size);
        cfg.max_doc_tokens = file.model.max_doc_tokens;
        cfg.max_code_tokens = file.model.max_code_tokens;
        cfg.train = file.train;
        if let Some(p) = file.index.partition {
            cfg.index_partition = partition(&p, "index.partition")?;
        }
        if let Some(p) = file.eval.partition {
            cfg.eval_partition = partition(&p, "eval.partition")?;
        }
        cfg.eval.candidates = file.eval.candidates.unwrap_or(cfg.eval.candidates);
        cfg.eval.seed = file.eval.seed.unwrap_or(cfg.eval.seed);
        cfg.eval.cutoff = file.eval.cutoff;
        if let Some(name) = file.eval.model_name {
            cfg.eval.model_name = name;
        }
        cfg.verbosity = file.verbosity.unwrap_or(cfg.verbosity);
        Ok(cfg)
    }

    /// Checks value ranges that the file format cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.dim == 0 {
            return Err(CliError::config("model.dim must be at least 1"));
        }
        if self.eval.candidates < 2 {
            return Err(CliError::config("eval.candidates must be at least 2"));
        }
        if self.max_doc_tokens == Some(0) || self.max_code_tokens == Some(0) {
            return Err(CliError::config("token caps must be at least 1"));
        }
        self.train.validate().map_err(|e| CliError::config(e.to_string()))
    }
}

/// The path for `name`, or a config error naming the flag and key to set.
pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str, key: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::config(format!("missing {flag} (or paths.{key} in the config file)")))
}

pub fn existing_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

pub fn writable_target(path: &Path, what: &str) -> Result<(), CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(CliError::config(format!("directory for {what} {} does not exist", path.display())));
    }
    if path.is_dir() {
        return Err(CliError::config(format!("{what} {} is a directory", path.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "verbosity = 0\n[paths]\ncorpus_dir = \"data\"\ncheckpoint = \"/abs/m.bin\"\n[model]\ndim = 16\n[train]\nlearning_rate = 0.0\nloss = \"in_batch_softmax\"\n[eval]\ncandidates = 64\npartition = \"valid\"\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.corpus_dir.unwrap(), dir.path().join("data"));
        assert_eq!(cfg.checkpoint.unwrap(), PathBuf::from("/abs/m.bin"));
        assert_eq!(cfg.dim, 16);
        assert_eq!(cfg.layers, DEFAULT_LAYERS);
        assert_eq!(cfg.train.learning_rate, 0.0);
        assert_eq!(cfg.train.loss, codesearch::training::LossKind::InBatchSoftmax);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
        assert_eq!(cfg.eval.candidates, 64);
        assert_eq!(cfg.eval_partition, Partition::Valid);
        assert_eq!(cfg.verbosity, 0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        for text in ["[model]\ndimm = 3\n", "[train]\nepochs = \"ten\"\n", "[eval]\npartition = \"dev\"\n", "not toml ["] {
            std::fs::write(&path, text).unwrap();
            let err = RunConfig::from_file(&path).unwrap_err();
            assert_eq!(err.exit_code(), 3, "{text}");
        }
    }
}
