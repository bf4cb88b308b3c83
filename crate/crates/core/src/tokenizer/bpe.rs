//! Byte-pair encoding over surface tokens.
//!
//! Merges never cross token boundaries. Training is the classic greedy loop:
//! merge the most frequent adjacent pair, ties going to the lexicographically
//! smallest `(left, right)`, until the vocabulary budget is spent or no pair
//! occurs at least twice. Pair counts are maintained incrementally; only the
//! words containing the merged pair are recounted.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::rc::Rc;

use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Word-boundary marker; only emitted by [`BpeModel::encode_words`].
pub const BOW_ID: u32 = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<bow>"];

const HEADER: &str = "BPE v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BpeError {
    #[error("cannot train on an empty token stream")]
    EmptyStream,
    #[error("target vocabulary {target} is below the {minimum} symbols of alphabet plus specials")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("token {0:?} contains whitespace or a reserved special symbol")]
    InvalidToken(String),
    #[error("id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("malformed model file at line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
}

type Sym = Rc<str>;
type Pair = (Sym, Sym);

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    pair: Reverse<Pair>,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.pair.cmp(&other.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    symbols: Vec<Sym>,
    count: u64,
}

fn pairs_of(symbols: &[Sym]) -> impl Iterator<Item = Pair> + '_ {
    symbols.windows(2).map(|w| (w[0].clone(), w[1].clone()))
}

/// Replaces every left-to-right, non-overlapping occurrence of `pair`.
fn merge_symbols(symbols: &[Sym], left: &str, right: &str, merged: &Sym) -> Vec<Sym> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && &*symbols[i] == left && &*symbols[i + 1] == right {
            out.push(merged.clone());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeModel {
    /// Learns merges from a multiset of surface tokens.
    pub fn train<I, S>(tokens: I, target_vocab_size: usize) -> Result<BpeModel, BpeError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() {
                continue;
            }
            if t.chars().any(char::is_whitespace) || SPECIALS.iter().any(|s| t.contains(s)) {
                return Err(BpeError::InvalidToken(t.to_string()));
            }
            *counts.entry(t.to_string()).or_insert(0) += 1;
        }
        Self::train_from_counts(&counts, target_vocab_size)
    }

    /// Same as [`BpeModel::train`] over pre-aggregated token frequencies.
    pub fn train_from_counts(counts: &BTreeMap<String, u64>, target_vocab_size: usize) -> Result<BpeModel, BpeError> {
        if counts.values().all(|&c| c == 0) {
            return Err(BpeError::EmptyStream);
        }
        let alphabet: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
        let minimum = alphabet.len() + SPECIALS.len();
        if target_vocab_size < minimum {
            return Err(BpeError::VocabTooSmall { target: target_vocab_size, minimum });
        }

        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(alphabet.iter().map(|c| c.to_string()));
        let mut known: HashSet<String> = vocab.iter().cloned().collect();

        let mut interned: HashMap<char, Sym> = HashMap::new();
        let mut words: Vec<Word> = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(w, &count)| Word {
                symbols: w
                    .chars()
                    .map(|c| interned.entry(c).or_insert_with(|| Rc::from(c.to_string())).clone())
                    .collect(),
                count,
            })
            .collect();

        let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
        let mut locations: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
        for (idx, word) in words.iter().enumerate() {
            for pair in pairs_of(&word.symbols) {
                *pair_counts.entry(pair.clone()).or_insert(0) += word.count;
                locations.entry(pair).or_default().insert(idx);
            }
        }
        let mut heap: BinaryHeap<Candidate> = pair_counts
            .iter()
            .map(|(p, &count)| Candidate { count, pair: Reverse(p.clone()) })
            .collect();

        let mut merges = Vec::new();
        while vocab.len() < target_vocab_size {
            let Some(best) = heap.pop() else { break };
            let pair = best.pair.0;
            if pair_counts.get(&pair).copied().unwrap_or(0) != best.count {
                continue; // stale entry
            }
            if best.count < 2 {
                break;
            }
            let merged: Sym = Rc::from(format!("{}{}", pair.0, pair.1));
            let affected = locations.remove(&pair).unwrap_or_default();
            let mut touched: HashSet<Pair> = HashSet::new();
            for idx in affected {
                let word = &mut words[idx];
                let updated = merge_symbols(&word.symbols, &pair.0, &pair.1, &merged);
                if updated.len() == word.symbols.len() {
                    continue;
                }
                for p in pairs_of(&word.symbols) {
                    if let Some(c) = pair_counts.get_mut(&p) {
                        *c -= word.count;
                    }
                    touched.insert(p);
                }
                for p in pairs_of(&updated) {
                    *pair_counts.entry(p.clone()).or_insert(0) += word.count;
                    locations.entry(p.clone()).or_default().insert(idx);
                    touched.insert(p);
                }
                word.symbols = updated;
            }
            for p in touched {
                match pair_counts.get(&p).copied() {
                    Some(0) | None => {
                        pair_counts.remove(&p);
                    }
                    Some(count) => heap.push(Candidate { count, pair: Reverse(p) }),
                }
            }
            if known.insert(merged.to_string()) {
                vocab.push(merged.to_string());
            }
            merges.push((pair.0.to_string(), pair.1.to_string()));
        }

        Ok(Self::from_parts(merges, vocab))
    }

    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> BpeModel {
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        let ids = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        BpeModel { merges, ranks, vocab, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, subword: &str) -> Option<u32> {
        self.ids.get(subword).copied()
    }

    pub fn subword(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Subword strings for one surface token, before id lookup.
    pub fn segment(&self, token: &str) -> Vec<String> {
        let mut symbols: Vec<String> = token.chars().map(|c| c.to_string()).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(r, _)| r);
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == *left && symbols[i + 1] == *right {
                    out.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
    }

    /// Encodes one surface token; characters outside the alphabet become UNK.
    pub fn encode(&self, token: &str) -> Vec<u32> {
        self.segment(token)
            .iter()
            .map(|s| self.ids.get(s).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Encodes a token sequence with a BOW marker before every word after the
    /// first, so [`BpeModel::decode`] can restore the word boundaries.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                out.push(BOW_ID);
            }
            out.extend(self.encode(w.as_ref()));
        }
        out
    }

    /// Concatenates subwords; BOW markers become single spaces, PAD is dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, BpeError> {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD_ID => {}
                BOW_ID => out.push(' '),
                _ => out.push_str(self.subword(id).ok_or(BpeError::IdOutOfRange {
                    id,
                    vocab_size: self.vocab.len(),
                })?),
            }
        }
        Ok(out)
    }

    /// Text serialization: header, merges, then exactly `vocab_size` vocab lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.vocab.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        for (i, s) in self.vocab.iter().enumerate() {
            let _ = writeln!(out, "{i} {s}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<BpeModel, BpeError> {
        let fail = |line: usize, reason: &str| BpeError::Format { line, reason: reason.to_string() };
        let lines: Vec<&str> = text.split_terminator('\n').collect();
        let header = lines.first().ok_or_else(|| fail(1, "empty file"))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| fail(1, "missing `BPE v1` header"))?
            .parse()
            .map_err(|_| fail(1, "bad vocabulary size"))?;
        if size < SPECIALS.len() || lines.len() < size + 1 {
            return Err(fail(lines.len(), "fewer vocabulary lines than declared"));
        }
        let merge_end = lines.len() - size;

        let mut merges = Vec::with_capacity(merge_end - 1);
        for (n, line) in lines[1..merge_end].iter().enumerate() {
            let (l, r) = line.split_once(' ').ok_or_else(|| fail(n + 2, "merge needs two subwords"))?;
            if l.is_empty() || r.is_empty() || r.contains(' ') {
                return Err(fail(n + 2, "merge needs two subwords"));
            }
            merges.push((l.to_string(), r.to_string()));
        }
        let mut vocab = Vec::with_capacity(size);
        for (n, line) in lines[merge_end..].iter().enumerate() {
            let lineno = merge_end + n + 1;
            let (id, s) = line.split_once(' ').ok_or_else(|| fail(lineno, "vocab entry needs `<id> <subword>`"))?;
            if id.parse::<usize>().ok() != Some(n) || s.is_empty() || s.contains(' ') {
                return Err(fail(lineno, "vocab ids must be consecutive from 0"));
            }
            vocab.push(s.to_string());
        }
        if vocab[..SPECIALS.len()] != SPECIALS {
            return Err(fail(merge_end + 1, "special symbols must occupy ids 0..3"));
        }
        let model = Self::from_parts(merges, vocab);
        if model.ids.len() != model.vocab.len() {
            return Err(fail(merge_end + 1, "duplicate vocabulary entry"));
        }
        for (n, (l, r)) in model.merges.iter().enumerate() {
            if !model.ids.contains_key(&format!("{l}{r}")) {
                return Err(fail(n + 2, "merge result missing from vocabulary"));
            }
        }
        Ok(model)
    }
}
