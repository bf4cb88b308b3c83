use codesearch::corpus::{CorpusEntry, CorpusSplit, Language, Partition};
use codesearch::encoder::{encode, EncoderConfig, EncoderParams, Modality};
use codesearch::index::{build_index, query_topk, IndexError};
use codesearch::tokenizer::{subtoken_counts, BpeModel, Tokenizer};
use codesearch::training::{encode_pairs, train, TrainConfig};

fn entry(id: &str, language: Language, doc: &str, code: &str) -> CorpusEntry {
    CorpusEntry {
        id: id.into(),
        language,
        doc_tokens: doc.split_whitespace().map(String::from).collect(),
        code_tokens: code.split_whitespace().map(String::from).collect(),
        raw_doc: None,
        raw_code: None,
    }
}

fn tokenizer(split: &CorpusSplit, vocab: usize) -> Tokenizer {
    Tokenizer::new(BpeModel::train_from_counts(&subtoken_counts(split), vocab).unwrap())
}

#[test]
fn single_entry_row_equals_its_encoding() {
    let split = CorpusSplit::new(Partition::Test, vec![entry("only", Language::Go, "open file", "func openFile ( p string )")]);
    let tok = tokenizer(&split, 40);
    let params = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), 8, 1), 2);
    let built = build_index(&split, &params, &tok).unwrap();
    assert_eq!(built.index.len(), 1);
    assert!(built.skipped.is_empty());
    let ids = tok.encode_code(&split.entries[0].code_tokens).unwrap();
    let expected = encode(&params, ids.ids(), Modality::Code(Language::Go)).unwrap().values;
    let row: Vec<f64> = built.index.row(0).iter().map(|&x| x as f64).collect();
    let rounded: Vec<f64> = expected.iter().map(|&x| x as f32 as f64).collect();
    assert_eq!(row, rounded);
}

#[test]
fn duplicate_code_gives_identical_rows_with_distinct_ids() {
    let split = CorpusSplit::new(
        Partition::Test,
        vec![
            entry("b", Language::Java, "sum values", "int sum ( int [ ] v )"),
            entry("a", Language::Java, "add up values", "int sum ( int [ ] v )"),
            entry("c", Language::Java, "print", "void print ( )"),
        ],
    );
    let tok = tokenizer(&split, 60);
    let params = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), 8, 1), 3);
    let index = build_index(&split, &params, &tok).unwrap().index;
    assert_eq!(index.row(0), index.row(1));
    assert_eq!(index.meta()[0].id, "b");
    assert_eq!(index.meta()[1].id, "a");

    let results = query_topk("sum", &index, &params, &tok, 3).unwrap();
    let pos_a = results.iter().position(|r| r.id == "a").unwrap();
    let pos_b = results.iter().position(|r| r.id == "b").unwrap();
    assert_eq!(pos_b, pos_a + 1, "tied rows are ordered by ascending id");
}

#[test]
fn hundred_entry_rows_are_unit_length() {
    let words = ["read", "write", "file", "socket", "parse", "json", "user", "name", "list", "map"];
    let entries: Vec<CorpusEntry> = (0..100)
        .map(|i| {
            let code = format!("def {}_{} ( x ) : return {} ( x )", words[i % 10], words[(i / 10) % 10], words[(i * 7) % 10]);
            entry(&format!("e{i:03}"), Language::ALL[i % 6], words[i % 10], &code)
        })
        .collect();
    let split = CorpusSplit::new(Partition::Test, entries);
    let tok = tokenizer(&split, 120);
    let params = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), 16, 2), 4);
    let index = build_index(&split, &params, &tok).unwrap().index;
    assert_eq!(index.len(), 100);
    for r in 0..index.len() {
        let n = index.row(r).iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-5, "row {r} norm {n}");
    }
}

#[test]
fn unencodable_entries_are_skipped_and_counted() {
    let split = CorpusSplit::new(
        Partition::Test,
        vec![entry("ok", Language::Ruby, "greet", "def greet puts hi end"), entry("odd", Language::Ruby, "x", "")],
    );
    let tok = tokenizer(&CorpusSplit::new(Partition::Train, vec![split.entries[0].clone()]), 40);
    let params = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), 4, 0), 1);
    let built = build_index(&split, &params, &tok).unwrap();
    assert_eq!(built.skipped, vec!["odd".to_string()]);
    assert_eq!(built.index.len(), 1);
    assert!(matches!(
        build_index(&CorpusSplit::new(Partition::Test, vec![]), &params, &tok),
        Err(IndexError::EmptyCorpus)
    ));
}

#[test]
fn stale_index_is_refused() {
    let split = CorpusSplit::new(Partition::Test, vec![entry("x", Language::Php, "echo", "echo $x ;")]);
    let tok = tokenizer(&split, 40);
    let a = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), 8, 1), 1);
    let b = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), 8, 1), 2);
    let index = build_index(&split, &a, &tok).unwrap().index;
    assert!(query_topk("echo", &index, &a, &tok, 1).is_ok());
    assert!(matches!(query_topk("echo", &index, &b, &tok, 1), Err(IndexError::Stale { .. })));
    assert!(matches!(query_topk("   ", &index, &a, &tok, 1), Err(IndexError::EmptyQuery)));
    assert!(matches!(query_topk("echo", &index, &a, &tok, 0), Err(IndexError::InvalidK)));
}

#[test]
fn overfit_model_ranks_paired_snippet_first() {
    let verbs = ["parse", "load", "merge", "sort"];
    let nouns = ["json", "image", "graph", "matrix"];
    let entries: Vec<CorpusEntry> = (0..16)
        .map(|i| {
            let (v, n) = (verbs[i / 4], nouns[i % 4]);
            entry(&format!("{v}_{n}"), Language::Python, &format!("{v} a {n}"), &format!("def {v}_{n} ( x ) : return {n} . {v} ( x )"))
        })
        .collect();
    let split = CorpusSplit::new(Partition::Train, entries);
    let tok = tokenizer(&split, 80);
    let (pairs, _) = encode_pairs(&split, &tok);
    let init = EncoderParams::init(EncoderConfig::new(tok.vocab_size(), 16, 1), 5);
    let config = TrainConfig { epochs: 150, batch_size: 8, learning_rate: 1e-2, seed: 5, ..Default::default() };
    let params = train(&config, &pairs, init, |_, _| Ok(())).unwrap().params;
    let index = build_index(&split, &params, &tok).unwrap().index;

    for e in &split.entries {
        let query = e.doc_tokens.join(" ");
        let top = query_topk(&query, &index, &params, &tok, 1).unwrap();
        // Brute force over every snippet with the library encoder.
        let q = encode(&params, tok.encode_query(&query).unwrap().ids(), Modality::Query).unwrap().values;
        let mut best = (f64::NEG_INFINITY, String::new());
        for c in &split.entries {
            let v = encode(&params, tok.encode_code(&c.code_tokens).unwrap().ids(), Modality::Code(c.language)).unwrap().values;
            let s: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            if s > best.0 {
                best = (s, c.id.clone());
            }
        }
        assert_eq!(best.1, e.id, "brute force disagrees for {query:?}");
        assert_eq!(top[0].id, e.id, "index disagrees for {query:?}");
    }
}
