//! Surface tokens to subword id sequences.

mod bpe;
mod lexer;

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub use bpe::{BpeError, BpeModel, BOW_ID, PAD_ID, SPECIALS, UNK_ID};
pub use lexer::{lex_code, lex_text, surface_subtokens, STR_SENTINEL};

use crate::corpus::{CorpusEntry, CorpusSplit, DEFAULT_MAX_CODE_TOKENS, DEFAULT_MAX_DOC_TOKENS};

pub const DEFAULT_VOCAB_SIZE: usize = 8192;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("input produced no tokens")]
    Empty,
    #[error(transparent)]
    Bpe(#[from] BpeError),
}

/// A non-empty, capped sequence of subword ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenIdSequence {
    ids: Vec<u32>,
}

impl TokenIdSequence {
    /// Truncates to `cap`; fails if nothing is left.
    pub fn new(mut ids: Vec<u32>, cap: usize) -> Result<Self, TokenizeError> {
        ids.truncate(cap);
        if ids.is_empty() {
            return Err(TokenizeError::Empty);
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lexer normalization plus a shared BPE model, with per-modality caps.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    bpe: BpeModel,
    pub max_doc_tokens: usize,
    pub max_code_tokens: usize,
}

impl Tokenizer {
    pub fn new(bpe: BpeModel) -> Self {
        Self {
            bpe,
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            max_code_tokens: DEFAULT_MAX_CODE_TOKENS,
        }
    }

    pub fn bpe(&self) -> &BpeModel {
        &self.bpe
    }

    pub fn vocab_size(&self) -> usize {
        self.bpe.vocab_size()
    }

    fn encode_subtokens<'a>(&self, subtokens: impl Iterator<Item = &'a str>, cap: usize) -> Result<TokenIdSequence, TokenizeError> {
        let mut ids = Vec::new();
        for t in subtokens {
            ids.extend(self.bpe.encode(t));
            if ids.len() >= cap {
                break;
            }
        }
        TokenIdSequence::new(ids, cap)
    }

    fn encode_surface(&self, tokens: &[String], cap: usize) -> Result<TokenIdSequence, TokenizeError> {
        let subs: Vec<String> = tokens.iter().flat_map(|t| surface_subtokens(t)).collect();
        self.encode_subtokens(subs.iter().map(String::as_str), cap)
    }

    pub fn encode_doc(&self, tokens: &[String]) -> Result<TokenIdSequence, TokenizeError> {
        self.encode_surface(tokens, self.max_doc_tokens)
    }

    pub fn encode_code(&self, tokens: &[String]) -> Result<TokenIdSequence, TokenizeError> {
        self.encode_surface(tokens, self.max_code_tokens)
    }

    /// Encodes a typed natural-language query.
    pub fn encode_query(&self, text: &str) -> Result<TokenIdSequence, TokenizeError> {
        let subs = lex_text(text);
        self.encode_subtokens(subs.iter().map(String::as_str), self.max_doc_tokens)
    }

    /// Encodes both sides of an entry, memoizing per-subtoken BPE output.
    pub fn encode_entry(
        &self,
        entry: &CorpusEntry,
        cache: &mut HashMap<String, Vec<u32>>,
    ) -> Result<(TokenIdSequence, TokenIdSequence), TokenizeError> {
        let mut run = |tokens: &[String], cap: usize| {
            let mut ids = Vec::new();
            'outer: for t in tokens {
                for sub in surface_subtokens(t) {
                    let enc = cache.entry(sub).or_insert_with_key(|k| self.bpe.encode(k));
                    ids.extend_from_slice(enc);
                    if ids.len() >= cap {
                        break 'outer;
                    }
                }
            }
            TokenIdSequence::new(ids, cap)
        };
        let doc = run(&entry.doc_tokens, self.max_doc_tokens)?;
        let code = run(&entry.code_tokens, self.max_code_tokens)?;
        Ok((doc, code))
    }
}

/// Frequencies of normalized subtokens over the doc and code sides of a split;
/// the input to [`BpeModel::train_from_counts`].
pub fn subtoken_counts(split: &CorpusSplit) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for entry in &split.entries {
        for t in entry.doc_tokens.iter().chain(&entry.code_tokens) {
            for sub in surface_subtokens(t) {
                *counts.entry(sub).or_insert(0) += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, Partition};

    fn tokenizer() -> Tokenizer {
        let entry = CorpusEntry {
            id: "a".into(),
            language: Language::Python,
            doc_tokens: vec!["Parse".into(), "JSON".into(), "string".into()],
            code_tokens: vec!["def".into(), "parseJson".into(), "(".into(), "\"x\"".into(), ")".into()],
            raw_doc: None,
            raw_code: None,
        };
        let split = CorpusSplit::new(Partition::Train, vec![entry]);
        let counts = subtoken_counts(&split);
        assert!(counts.contains_key(STR_SENTINEL));
        Tokenizer::new(BpeModel::train_from_counts(&counts, 60).unwrap())
    }

    #[test]
    fn query_and_doc_share_normalization() {
        let t = tokenizer();
        let q = t.encode_query("parse JSON string").unwrap();
        let d = t.encode_doc(&["Parse".into(), "JSON".into(), "string".into()]).unwrap();
        assert_eq!(q, d);
    }

    #[test]
    fn empty_query_is_error() {
        let t = tokenizer();
        assert_eq!(t.encode_query("   "), Err(TokenizeError::Empty));
    }

    #[test]
    fn caps_apply_after_bpe() {
        let mut t = tokenizer();
        t.max_code_tokens = 3;
        let code = t.encode_code(&["def".into(), "parseJson".into(), "(".into()]).unwrap();
        assert_eq!(code.len(), 3);
        assert!(code.ids().iter().all(|&id| id != PAD_ID && (id as usize) < t.vocab_size()));
    }

    #[test]
    fn cached_entry_encoding_matches_direct() {
        let t = tokenizer();
        let entry = CorpusEntry {
            id: "b".into(),
            language: Language::Python,
            doc_tokens: vec!["string".into(), "parse".into()],
            code_tokens: vec!["parseJson".into(), "zz".into()],
            raw_doc: None,
            raw_code: None,
        };
        let mut cache = HashMap::new();
        let (doc, code) = t.encode_entry(&entry, &mut cache).unwrap();
        assert_eq!(doc, t.encode_doc(&entry.doc_tokens).unwrap());
        assert_eq!(code, t.encode_code(&entry.code_tokens).unwrap());
        assert_eq!(*code.ids().last().unwrap(), UNK_ID);
    }
}
