//! Ranking metrics and the per-language evaluation harness.
//!
//! Each test docstring is ranked against its own snippet plus distractors
//! drawn from the same language; the paired snippet is the only relevant
//! candidate.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusEntry, CorpusSplit, Language};
use crate::encoder::{encode, EncoderParams, Modality};
use crate::index::{rank_order, row_dot, EmbeddingIndex, IndexError};
use crate::io_util::hex;
use crate::tokenizer::Tokenizer;

pub const DEFAULT_CANDIDATES: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("no relevant candidate in the ranking")]
    NoRelevant,
    #[error("no tasks to evaluate")]
    NoTasks,
    #[error("candidate set size must be at least 2, got {0}")]
    InvalidCandidates(usize),
    #[error("scorer returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Normalized discounted cumulative gain of a ranking with binary labels.
///
/// Ranks are 1-based with a `log2(rank + 1)` discount; the ideal ordering
/// puts every relevant item first. `cutoff` limits both sums.
pub fn ndcg_from_labels(labels: &[bool], cutoff: Option<usize>) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::EmptyRanking);
    }
    let relevant = labels.iter().filter(|&&l| l).count();
    if relevant == 0 {
        return Err(EvalError::NoRelevant);
    }
    let limit = cutoff.unwrap_or(labels.len()).min(labels.len());
    let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = (0..limit).filter(|&i| labels[i]).map(gain).sum();
    let idcg: f64 = (0..relevant.min(limit)).map(gain).sum();
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok((dcg / idcg).min(1.0))
}

/// [`ndcg_from_labels`] over item ids.
pub fn ndcg<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>, cutoff: Option<usize>) -> Result<f64, EvalError> {
    let labels: Vec<bool> = ranking.iter().map(|id| relevant.contains(id)).collect();
    ndcg_from_labels(&labels, cutoff)
}

/// Mean reciprocal rank. `None` marks a task whose relevant item was not
/// retrieved; it contributes 0.
pub fn mrr(ranks: &[Option<usize>]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let total: f64 = ranks.iter().map(|r| r.filter(|&r| r > 0).map_or(0.0, |r| 1.0 / r as f64)).sum();
    Ok(total / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Candidates per task, the relevant snippet included.
    pub candidates: usize,
    pub seed: u64,
    pub cutoff: Option<usize>,
    /// Row label in the report table.
    pub model_name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { candidates: DEFAULT_CANDIDATES, seed: 0, cutoff: None, model_name: "this run".into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub relevant_id: String,
    pub language: Language,
    pub query: Vec<String>,
    /// Relevant id first, then distractors.
    pub candidate_ids: Vec<String>,
}

/// One task per entry; distractors are sampled without replacement from the
/// other entries of the same language. Languages with a single entry yield
/// no tasks and a warning.
pub fn build_tasks(entries: &[&CorpusEntry], candidates: usize, seed: u64) -> Result<(Vec<EvalTask>, Vec<String>), EvalError> {
    if candidates < 2 {
        return Err(EvalError::InvalidCandidates(candidates));
    }
    let mut by_lang: BTreeMap<Language, Vec<&CorpusEntry>> = BTreeMap::new();
    for e in entries {
        by_lang.entry(e.language).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(entries.len());
    let mut warnings = Vec::new();
    for e in entries {
        let pool = &by_lang[&e.language];
        if pool.len() < 2 {
            warnings.push(format!("{}: only one entry, no distractors available", e.language));
            continue;
        }
        let self_pos = pool.iter().position(|p| std::ptr::eq(*p, *e)).expect("entry in its pool");
        let wanted = (candidates - 1).min(pool.len() - 1);
        let mut candidate_ids = Vec::with_capacity(wanted + 1);
        candidate_ids.push(e.id.clone());
        for i in sample(&mut rng, pool.len() - 1, wanted) {
            let j = if i >= self_pos { i + 1 } else { i };
            candidate_ids.push(pool[j].id.clone());
        }
        tasks.push(EvalTask { relevant_id: e.id.clone(), language: e.language, query: e.doc_tokens.clone(), candidate_ids });
    }
    warnings.dedup();
    Ok((tasks, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub relevant_id: String,
    pub language: Language,
    /// 1-based rank of the relevant snippet among the candidates.
    pub rank: usize,
    pub candidates: usize,
    pub ndcg: f64,
}

/// Ranks every task's candidates by `scorer` (aligned with
/// `candidate_ids`), ordering by score descending then id ascending.
/// Tasks the scorer rejects with `None` are skipped.
pub fn evaluate_tasks<F>(tasks: &[EvalTask], cutoff: Option<usize>, scorer: F) -> Result<(Vec<TaskResult>, usize), EvalError>
where
    F: Fn(&EvalTask) -> Option<Vec<f64>> + Sync,
{
    let results: Vec<Option<Result<TaskResult, EvalError>>> = tasks
        .par_iter()
        .map(|task| {
            let scores = scorer(task)?;
            Some(score_task(task, &scores, cutoff))
        })
        .collect();
    let mut out = Vec::with_capacity(tasks.len());
    let mut skipped = 0;
    for r in results {
        match r {
            Some(r) => out.push(r?),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

fn score_task(task: &EvalTask, scores: &[f64], cutoff: Option<usize>) -> Result<TaskResult, EvalError> {
    let n = task.candidate_ids.len();
    if scores.len() != n {
        return Err(EvalError::ScoreCount { expected: n, got: scores.len() });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rank_order(scores[a], &task.candidate_ids[a], scores[b], &task.candidate_ids[b]));
    let labels: Vec<bool> = order.iter().map(|&i| task.candidate_ids[i] == task.relevant_id).collect();
    let rank = labels.iter().position(|&l| l).ok_or(EvalError::NoRelevant)? + 1;
    Ok(TaskResult {
        relevant_id: task.relevant_id.clone(),
        language: task.language,
        rank,
        candidates: n,
        ndcg: ndcg_from_labels(&labels, cutoff)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub language: Language,
    pub ndcg: f64,
    pub mrr: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub fingerprint: Option<String>,
    pub config: EvalConfig,
    /// Present languages in canonical order.
    pub languages: Vec<LanguageMetrics>,
    pub absent: Vec<Language>,
    /// Unweighted mean over present languages.
    pub mean_ndcg: f64,
    pub mean_mrr: f64,
    pub tasks: usize,
    pub skipped_tasks: usize,
    pub warnings: Vec<String>,
}

/// A published result row shown beside a run for comparison.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub mean: &'static str,
    /// Go, Java, JavaScript, Php, Python, Ruby.
    pub per_language: [&'static str; 6],
}

/// Full-corpus numbers for this model family and the plain NBoW baseline.
/// Not reproducible at small scale; shown for context only.
pub const REFERENCE_ROWS: [ReferenceRow; 3] = [
    ReferenceRow { model: "NBoW+Weighted", mean: "0.3841", per_language: ["0.3253", "0.4248", "0.3611", "0.3399", "0.4717", "0.3816"] },
    ReferenceRow { model: "NBoW+Self-Attn", mean: "0.3732", per_language: ["0.3415", "0.4075", "0.3455", "0.3235", "0.4551", "0.3660"] },
    ReferenceRow { model: "NBoW Baseline", mean: "0.340", per_language: ["0.278", "0.355", "0.311", "0.291", "0.448", "0.360"] },
];

impl EvalReport {
    /// Aggregates task results per language.
    pub fn from_results(
        results: &[TaskResult],
        skipped_tasks: usize,
        config: &EvalConfig,
        fingerprint: Option<String>,
        mut warnings: Vec<String>,
    ) -> Result<Self, EvalError> {
        if results.is_empty() {
            return Err(EvalError::NoTasks);
        }
        let cutoff = config.cutoff.unwrap_or(usize::MAX);
        let mut languages = Vec::new();
        let mut absent = Vec::new();
        for lang in Language::ALL {
            let rs: Vec<&TaskResult> = results.iter().filter(|r| r.language == lang).collect();
            if rs.is_empty() {
                absent.push(lang);
                continue;
            }
            let ranks: Vec<Option<usize>> = rs.iter().map(|r| Some(r.rank).filter(|&k| k <= cutoff)).collect();
            languages.push(LanguageMetrics {
                language: lang,
                ndcg: rs.iter().map(|r| r.ndcg).sum::<f64>() / rs.len() as f64,
                mrr: mrr(&ranks)?,
                tasks: rs.len(),
            });
        }
        if !absent.is_empty() {
            let names: Vec<&str> = absent.iter().map(|l| l.as_str()).collect();
            warnings.push(format!("no test tasks for {}; mean taken over present languages", names.join(", ")));
        }
        let k = languages.len() as f64;
        Ok(Self {
            model_name: config.model_name.clone(),
            fingerprint,
            config: config.clone(),
            mean_ndcg: languages.iter().map(|m| m.ndcg).sum::<f64>() / k,
            mean_mrr: languages.iter().map(|m| m.mrr).sum::<f64>() / k,
            languages,
            absent,
            tasks: results.len(),
            skipped_tasks,
            warnings,
        })
    }

    pub fn language(&self, language: Language) -> Option<&LanguageMetrics> {
        self.languages.iter().find(|m| m.language == language)
    }

    /// Aligned text table: reference rows, then this run's NDCG and MRR.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Model".to_string(), "NDCG".to_string()];
        header.extend(Language::ALL.iter().map(|l| l.display_name().to_string()));
        rows.push(header);
        for r in REFERENCE_ROWS {
            let mut row = vec![format!("{} (reference)", r.model), r.mean.to_string()];
            row.extend(r.per_language.iter().map(|s| s.to_string()));
            rows.push(row);
        }
        let cell = |m: Option<&LanguageMetrics>, f: fn(&LanguageMetrics) -> f64| m.map_or("-".to_string(), |m| format!("{:.4}", f(m)));
        let mut ndcg_row = vec![self.model_name.clone(), format!("{:.4}", self.mean_ndcg)];
        ndcg_row.extend(Language::ALL.iter().map(|&l| cell(self.language(l), |m| m.ndcg)));
        rows.push(ndcg_row);
        let mut mrr_row = vec![format!("{} (MRR)", self.model_name), format!("{:.4}", self.mean_mrr)];
        mrr_row.extend(Language::ALL.iter().map(|&l| cell(self.language(l), |m| m.mrr)));
        rows.push(mrr_row);

        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        let _ = writeln!(out, "tasks {} skipped {} candidates {} seed {}", self.tasks, self.skipped_tasks, self.config.candidates, self.config.seed);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores each test docstring against indexed snippets of the same
/// language. Test entries missing from the index, or whose docstring
/// encodes to nothing, are skipped and counted.
pub fn evaluate(
    params: &EncoderParams,
    tokenizer: &Tokenizer,
    index: &EmbeddingIndex,
    test: &CorpusSplit,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    index.check_model(params)?;
    let positions = index.positions();
    let indexed: Vec<&CorpusEntry> = test.entries.iter().filter(|e| positions.contains_key(e.id.as_str())).collect();
    let missing = test.len() - indexed.len();
    let (tasks, mut warnings) = build_tasks(&indexed, config.candidates, config.seed)?;
    if missing > 0 {
        warnings.push(format!("{missing} test entries are not in the index"));
    }
    let (results, skipped) = evaluate_tasks(&tasks, config.cutoff, |task| {
        let ids = tokenizer.encode_doc(&task.query).ok()?;
        let q = encode(params, ids.ids(), Modality::Query).ok()?.values;
        Some(task.candidate_ids.iter().map(|id| row_dot(index.row(positions[id.as_str()]), &q)).collect())
    })?;
    EvalReport::from_results(&results, skipped + missing, config, Some(hex(index.fingerprint())), warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_from_labels(&[true, false, false], None).unwrap(), 1.0);
        assert_eq!(ndcg_from_labels(&[false, false, true, false], None).unwrap(), 0.5);
        assert_eq!(ndcg_from_labels(&[true, true, false, false], None).unwrap(), 1.0);
        assert_eq!(ndcg_from_labels(&[false, false, true], Some(2)).unwrap(), 0.0);
        assert!(matches!(ndcg_from_labels(&[false, false], None), Err(EvalError::NoRelevant)));
        assert!(matches!(ndcg_from_labels(&[], None), Err(EvalError::EmptyRanking)));
        let rel: HashSet<&str> = ["b"].into_iter().collect();
        assert_eq!(ndcg(&["x", "y", "b"], &rel, None).unwrap(), 0.5);
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[Some(1), Some(1)]).unwrap(), 1.0);
        assert_eq!(mrr(&[Some(2), Some(4)]).unwrap(), 0.375);
        assert_eq!(mrr(&[None]).unwrap(), 0.0);
        assert!(mrr(&[]).is_err());
    }

    fn entry(id: &str, language: Language) -> CorpusEntry {
        CorpusEntry {
            id: id.into(),
            language,
            doc_tokens: vec![id.into()],
            code_tokens: vec![id.into()],
            raw_doc: None,
            raw_code: None,
        }
    }

    #[test]
    fn tasks_stay_within_language() {
        let entries: Vec<CorpusEntry> = (0..30)
            .map(|i| entry(&format!("e{i:02}"), if i < 20 { Language::Go } else { Language::Ruby }))
            .chain([entry("solo", Language::Php)])
            .collect();
        let refs: Vec<&CorpusEntry> = entries.iter().collect();
        let (tasks, warnings) = build_tasks(&refs, 5, 3).unwrap();
        assert_eq!(tasks.len(), 30);
        assert_eq!(warnings.len(), 1);
        for t in &tasks {
            assert_eq!(t.candidate_ids[0], t.relevant_id);
            assert_eq!(t.candidate_ids.len(), 5);
            let unique: HashSet<&String> = t.candidate_ids.iter().collect();
            assert_eq!(unique.len(), 5);
            let lang = |id: &str| entries.iter().find(|e| e.id == id).unwrap().language;
            assert!(t.candidate_ids.iter().all(|c| lang(c) == t.language));
        }
        assert_eq!(build_tasks(&refs, 5, 3).unwrap().0, tasks);
        let (all, _) = build_tasks(&refs, 1000, 3).unwrap();
        assert_eq!(all[0].candidate_ids.len(), 20);
        assert_eq!(all[25].candidate_ids.len(), 10);
    }

    #[test]
    fn oracle_and_adversarial_scorers() {
        let entries: Vec<CorpusEntry> = (0..1000).map(|i| entry(&format!("s{i:04}"), Language::Java)).collect();
        let refs: Vec<&CorpusEntry> = entries.iter().take(50).collect();
        let all: Vec<&CorpusEntry> = entries.iter().collect();
        let (tasks, _) = build_tasks(&refs, 1000, 1).unwrap();
        let (results, _) =
            evaluate_tasks(&tasks, None, |t| Some(t.candidate_ids.iter().map(|c| if *c == t.relevant_id { 1.0 } else { -1.0 }).collect()))
                .unwrap();
        let report = EvalReport::from_results(&results, 0, &EvalConfig::default(), None, vec![]).unwrap();
        assert_eq!(report.mean_ndcg, 1.0);
        assert_eq!(report.language(Language::Java).unwrap().mrr, 1.0);
        assert_eq!(report.absent.len(), 5);

        let (tasks, _) = build_tasks(&all[..3], 1000, 1).unwrap();
        let _ = tasks;
        let (tasks, _) = build_tasks(&all, 1000, 1).unwrap();
        let (results, _) =
            evaluate_tasks(&tasks[..10], None, |t| Some(t.candidate_ids.iter().map(|c| if *c == t.relevant_id { -1.0 } else { 1.0 }).collect()))
                .unwrap();
        let expected = 1.0 / 1001f64.log2();
        assert!(results.iter().all(|r| r.rank == 1000 && (r.ndcg - expected).abs() < 1e-15));
        assert!((expected - 0.1003).abs() < 1e-4);
    }

    #[test]
    fn table_shape() {
        let results = vec![TaskResult { relevant_id: "a".into(), language: Language::Go, rank: 2, candidates: 2, ndcg: 1.0 / 3f64.log2() }];
        let report = EvalReport::from_results(&results, 0, &EvalConfig::default(), None, vec![]).unwrap();
        let table = report.to_table();
        let header = table.lines().next().unwrap();
        for col in ["Model", "NDCG", "Go", "Java", "JavaScript", "Php", "Python", "Ruby"] {
            assert!(header.contains(col));
        }
        assert!(table.contains("0.3841"));
        assert!(table.contains("0.6309"));
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
