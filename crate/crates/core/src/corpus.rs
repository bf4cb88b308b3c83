//! Docstring/function pair corpora.
//!
//! Records are line-delimited JSON objects with the fields `id`, `language`,
//! `doc_tokens`, `code_tokens` and the optional `raw_doc` / `raw_code`.
//! CodeSearchNet's own field names (`url`, `docstring_tokens`, `docstring`,
//! `code`) are accepted as aliases so the upstream `.jsonl.gz` shards load
//! unchanged. Files ending in `.gz` are decompressed on the fly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tokenizer::lex_code;

pub const DEFAULT_MAX_DOC_TOKENS: usize = 64;
pub const DEFAULT_MAX_CODE_TOKENS: usize = 256;
pub const DEFAULT_MAX_INVALID_FRACTION: f64 = 0.10;

/// The six programming languages of the CodeSearchNet corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Go,
    Java,
    JavaScript,
    Php,
    Python,
    Ruby,
}

impl Language {
    pub const ALL: [Language; 6] = [
        Language::Go,
        Language::Java,
        Language::JavaScript,
        Language::Php,
        Language::Python,
        Language::Ruby,
    ];

    /// Stable position in [`Language::ALL`]; also the on-disk language byte.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Language> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Language::Go => "go",
            Language::Java => "java",
            Language::JavaScript => "javascript",
            Language::Php => "php",
            Language::Python => "python",
            Language::Ruby => "ruby",
        }
    }

    /// Column heading used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Language::Go => "Go",
            Language::Java => "Java",
            Language::JavaScript => "JavaScript",
            Language::Php => "Php",
            Language::Python => "Python",
            Language::Ruby => "Ruby",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Language::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| CorpusError::UnsupportedLanguage(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Valid, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| CorpusError::Schema {
                field: "partition",
                reason: format!("unknown partition {s:?}"),
            })
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error in field `{field}`: {reason}")]
    Schema { field: &'static str, reason: String },
    #[error("unsupported language {0:?}; expected one of go, java, javascript, php, python, ruby")]
    UnsupportedLanguage(String),
    #[error("duplicate id {0:?} within split")]
    DuplicateId(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {rejected} of {total} lines rejected, above the {threshold} tolerance")]
    Quality {
        path: PathBuf,
        rejected: usize,
        total: usize,
        threshold: f64,
    },
    #[error("id {id:?} appears in both {first} and {second}")]
    Overlap {
        id: String,
        first: Partition,
        second: Partition,
    },
}

/// One docstring/function pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub language: Language,
    pub doc_tokens: Vec<String>,
    pub code_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_doc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_code: Option<String>,
}

impl CorpusEntry {
    /// Serializes to a single JSONL record (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("corpus entries always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub max_doc_tokens: usize,
    pub max_code_tokens: usize,
    /// Fraction of rejected lines above which loading fails.
    pub max_invalid_fraction: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            max_code_tokens: DEFAULT_MAX_CODE_TOKENS,
            max_invalid_fraction: DEFAULT_MAX_INVALID_FRACTION,
        }
    }
}

fn string_field<'a>(
    obj: &'a Map<String, Value>,
    names: &[&str],
    field: &'static str,
) -> Result<Option<&'a str>, CorpusError> {
    for name in names {
        match obj.get(*name) {
            None | Some(Value::Null) => continue,
            Some(Value::String(s)) => return Ok(Some(s)),
            Some(other) => {
                return Err(CorpusError::Schema {
                    field,
                    reason: format!("expected a string, found {}", json_kind(other)),
                })
            }
        }
    }
    Ok(None)
}

fn token_field(
    obj: &Map<String, Value>,
    names: &[&str],
    field: &'static str,
) -> Result<Option<Vec<String>>, CorpusError> {
    for name in names {
        match obj.get(*name) {
            None | Some(Value::Null) => continue,
            Some(Value::Array(items)) => {
                return items
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => Ok(s.clone()),
                        other => Err(CorpusError::Schema {
                            field,
                            reason: format!("expected string tokens, found {}", json_kind(other)),
                        }),
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(Some);
            }
            Some(other) => {
                return Err(CorpusError::Schema {
                    field,
                    reason: format!("expected an array, found {}", json_kind(other)),
                })
            }
        }
    }
    Ok(None)
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn markup_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    // Javadoc/JSDoc inline tags keep their label, HTML tags and reST/markdown
    // emphasis characters are dropped.
    PATTERN.get_or_init(|| Regex::new(r"\{@\w+\s+([^}]*)\}|</?[A-Za-z][^>]*>|[`*]+|:\w+:").unwrap())
}

/// Summary tokens for a raw docstring: text up to the first blank line with
/// inline markup stripped, whitespace-split.
pub fn doc_summary_tokens(raw_doc: &str) -> Vec<String> {
    let summary: Vec<&str> = raw_doc
        .trim()
        .lines()
        .take_while(|l| !l.trim().is_empty())
        .collect();
    let joined = summary.join(" ");
    let stripped = markup_pattern().replace_all(&joined, |caps: &regex::Captures<'_>| {
        caps.get(1).map_or(String::from(" "), |m| m.as_str().to_string())
    });
    stripped.split_whitespace().map(str::to_string).collect()
}

/// Parses and validates one corpus record.
pub fn parse_corpus_line(line: &str, opts: &LoadOptions) -> Result<CorpusEntry, CorpusError> {
    let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        offset: byte_offset(line, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(CorpusError::Parse {
            offset: 0,
            message: "record is not a JSON object".into(),
        });
    };

    let id = string_field(&obj, &["id", "url"], "id")?
        .ok_or(CorpusError::Schema { field: "id", reason: "missing".into() })?
        .to_string();
    if id.is_empty() {
        return Err(CorpusError::Schema { field: "id", reason: "empty".into() });
    }
    let language: Language = string_field(&obj, &["language"], "language")?
        .ok_or(CorpusError::Schema { field: "language", reason: "missing".into() })?
        .parse()?;
    let raw_doc = string_field(&obj, &["raw_doc", "docstring"], "raw_doc")?.map(str::to_string);
    let raw_code = string_field(&obj, &["raw_code", "code"], "raw_code")?.map(str::to_string);

    let mut doc_tokens = match token_field(&obj, &["doc_tokens", "docstring_tokens"], "doc_tokens")? {
        Some(t) => t,
        None => match &raw_doc {
            Some(raw) => doc_summary_tokens(raw),
            None => return Err(CorpusError::Schema { field: "doc_tokens", reason: "missing".into() }),
        },
    };
    let mut code_tokens = match token_field(&obj, &["code_tokens"], "code_tokens")? {
        Some(t) => t,
        None => match &raw_code {
            Some(raw) => lex_code(raw, language),
            None => return Err(CorpusError::Schema { field: "code_tokens", reason: "missing".into() }),
        },
    };
    doc_tokens.retain(|t| !t.trim().is_empty());
    code_tokens.retain(|t| !t.trim().is_empty());
    doc_tokens.truncate(opts.max_doc_tokens);
    code_tokens.truncate(opts.max_code_tokens);
    if doc_tokens.is_empty() {
        return Err(CorpusError::Schema { field: "doc_tokens", reason: "empty".into() });
    }
    if code_tokens.is_empty() {
        return Err(CorpusError::Schema { field: "code_tokens", reason: "empty".into() });
    }

    Ok(CorpusEntry { id, language, doc_tokens, code_tokens, raw_doc, raw_code })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub partition: Partition,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusSplit {
    pub fn new(partition: Partition, entries: Vec<CorpusEntry>) -> Self {
        Self { partition, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of one language, in split order.
    pub fn language(&self, language: Language) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.language == language)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    /// 1-based line number.
    pub line: usize,
    /// Byte offset of the start of the line in the (decompressed) file.
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub split: CorpusSplit,
    pub total_lines: usize,
    pub rejected: Vec<RejectedLine>,
    pub warnings: Vec<String>,
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(reader)))
}

/// Loads one partition from a JSONL file (optionally gzip-compressed).
///
/// Rejected lines are counted and reported; loading only fails when the
/// rejected fraction exceeds `opts.max_invalid_fraction`.
pub fn load_split(path: &Path, partition: Partition, opts: &LoadOptions) -> Result<LoadReport, CorpusError> {
    let reader = open_reader(path)?;
    read_split(reader, path, partition, opts)
}

/// Same as [`load_split`] over any buffered reader; `origin` only labels errors.
pub fn read_split<R: BufRead>(
    mut reader: R,
    origin: &Path,
    partition: Partition,
    opts: &LoadOptions,
) -> Result<LoadReport, CorpusError> {
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut buf = String::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut total = 0usize;

    loop {
        buf.clear();
        let n = reader
            .read_line(&mut buf)
            .map_err(|source| CorpusError::Io { path: origin.to_path_buf(), source })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line_start = offset;
        offset += n;
        let line = buf.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = parse_corpus_line(line, opts).and_then(|entry| {
            if seen.insert(entry.id.clone()) {
                Ok(entry)
            } else {
                Err(CorpusError::DuplicateId(entry.id))
            }
        });
        match parsed {
            Ok(entry) => entries.push(entry),
            Err(e) => {
                let offset = match &e {
                    CorpusError::Parse { offset, .. } => line_start + offset,
                    _ => line_start,
                };
                rejected.push(RejectedLine { line: line_no, offset, reason: e.to_string() });
            }
        }
    }

    if total == 0 {
        warnings.push(format!("{}: no records", origin.display()));
    }
    if total > 0 && rejected.len() as f64 / total as f64 > opts.max_invalid_fraction {
        return Err(CorpusError::Quality {
            path: origin.to_path_buf(),
            rejected: rejected.len(),
            total,
            threshold: opts.max_invalid_fraction,
        });
    }
    if !rejected.is_empty() {
        warnings.push(format!("{}: rejected {} of {} lines", origin.display(), rejected.len(), total));
    }

    Ok(LoadReport {
        split: CorpusSplit::new(partition, entries),
        total_lines: total,
        rejected,
        warnings,
    })
}

/// Locates the file for `partition` inside a corpus directory:
/// `<dir>/<partition>.jsonl` or `<dir>/<partition>.jsonl.gz`.
pub fn split_path(dir: &Path, partition: Partition) -> Option<PathBuf> {
    ["jsonl", "jsonl.gz"]
        .iter()
        .map(|ext| dir.join(format!("{}.{ext}", partition.as_str())))
        .find(|p| p.is_file())
}

/// Checks that no id occurs in more than one partition.
pub fn check_disjoint(splits: &[&CorpusSplit]) -> Result<(), CorpusError> {
    let mut owner: HashMap<&str, Partition> = HashMap::new();
    for split in splits {
        for entry in &split.entries {
            if let Some(&first) = owner.get(entry.id.as_str()) {
                if first != split.partition {
                    return Err(CorpusError::Overlap {
                        id: entry.id.clone(),
                        first,
                        second: split.partition,
                    });
                }
            } else {
                owner.insert(&entry.id, split.partition);
            }
        }
    }
    Ok(())
}

/// Per-language, per-partition entry counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitStats {
    counts: BTreeMap<(Language, Partition), usize>,
}

impl SplitStats {
    pub fn get(&self, language: Language, partition: Partition) -> usize {
        self.counts.get(&(language, partition)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn partition_total(&self, partition: Partition) -> usize {
        Language::ALL.iter().map(|&l| self.get(l, partition)).sum()
    }

    /// Builds a table from explicit counts, e.g. published reference figures.
    pub fn from_counts(rows: &[(Partition, [usize; 6])]) -> Self {
        let mut counts = BTreeMap::new();
        for (partition, per_lang) in rows {
            for (lang, &n) in Language::ALL.iter().zip(per_lang) {
                counts.insert((*lang, *partition), n);
            }
        }
        Self { counts }
    }
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "Partition")?;
        for lang in Language::ALL {
            write!(f, " {:>10}", lang.display_name())?;
        }
        writeln!(f)?;
        for partition in Partition::ALL {
            let name = match partition {
                Partition::Train => "Train",
                Partition::Valid => "Valid",
                Partition::Test => "Test",
            };
            write!(f, "{name:<10}")?;
            for lang in Language::ALL {
                write!(f, " {:>10}", self.get(lang, partition))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn split_stats(splits: &[&CorpusSplit]) -> SplitStats {
    let mut counts = BTreeMap::new();
    for split in splits {
        for entry in &split.entries {
            *counts.entry((entry.language, split.partition)).or_insert(0) += 1;
        }
    }
    SplitStats { counts }
}

/// Published CodeSearchNet partition sizes, kept as reference data.
pub fn codesearchnet_reference_stats() -> SplitStats {
    SplitStats::from_counts(&[
        (Partition::Train, [317_832, 454_451, 123_889, 523_712, 412_178, 48_791]),
        (Partition::Test, [14_291, 26_909, 6_483, 28_391, 22_176, 2_279]),
        (Partition::Valid, [14_242, 15_328, 8_253, 26_015, 23_107, 2_209]),
    ])
}
