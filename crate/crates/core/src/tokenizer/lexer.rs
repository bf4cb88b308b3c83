//! Heuristic code lexer.
//!
//! Not a grammar: it recognises identifiers, numbers, string literals,
//! comments and operators well enough to pull names and keywords out of a
//! function body or a typed query. Identifiers are further split into
//! lowercase subtokens on underscores and camel-case boundaries, so
//! `parseHTTPHeader_v2` becomes `parse http header v2`.

use crate::corpus::Language;

/// Every string literal collapses to this token.
pub const STR_SENTINEL: &str = "<str>";

const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", "===", "!==", "**=", "...", "->", "=>", "::", "==", "!=", "<=", ">=", "&&",
    "||", "++", "--", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<", ">>", "**", ":=", "<-",
    "?.", "??",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Code(Language),
    Text,
}

/// Lexes raw source text of `language` into surface subtokens.
pub fn lex_code(source: &str, language: Language) -> Vec<String> {
    lex(source, Mode::Code(language))
}

/// Lexes free text (a typed query, a docstring word). Quotes and `#` are
/// ordinary punctuation here.
pub fn lex_text(text: &str) -> Vec<String> {
    lex(text, Mode::Text)
}

/// Normalizes one pre-tokenized surface token (as found in `doc_tokens` or
/// `code_tokens`) into subtokens. A token that is itself a quoted literal
/// collapses to [`STR_SENTINEL`].
pub fn surface_subtokens(token: &str) -> Vec<String> {
    if is_quoted_literal(token) {
        return vec![STR_SENTINEL.to_string()];
    }
    lex_text(token)
}

fn is_quoted_literal(token: &str) -> bool {
    let trimmed = token.trim_start_matches(|c: char| c.is_ascii_alphabetic() && c != '"' && c != '\'');
    // Allow short prefixes such as r"..", b'..', f"..".
    let prefix_len = token.len() - trimmed.len();
    if prefix_len > 2 {
        return false;
    }
    let mut chars = trimmed.chars();
    match (chars.next(), trimmed.chars().last()) {
        (Some(open @ ('"' | '\'' | '`')), Some(close)) => trimmed.chars().count() >= 2 && open == close,
        _ => false,
    }
}

fn comment_styles(mode: Mode) -> (bool, bool) {
    // (hash line comments, C-style comments)
    match mode {
        Mode::Text => (false, false),
        Mode::Code(Language::Python | Language::Ruby) => (true, false),
        Mode::Code(Language::Php) => (true, true),
        Mode::Code(Language::Go | Language::Java | Language::JavaScript) => (false, true),
    }
}

fn lex(source: &str, mode: Mode) -> Vec<String> {
    let chars: Vec<char> = source.chars().collect();
    let (hash_comments, c_comments) = comment_styles(mode);
    let mut out = Vec::new();
    let mut i = 0;

    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();

        if c.is_whitespace() {
            i += 1;
        } else if hash_comments && c == '#' || c_comments && c == '/' && next == Some('/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c_comments && c == '/' && next == Some('*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if mode != Mode::Text && matches!(c, '"' | '\'' | '`') {
            i = skip_string(&chars, i);
            out.push(STR_SENTINEL.to_string());
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric()
                    || chars[i] == '_'
                    || chars[i] == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
            {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            split_identifier(&chars[start..i], &mut out);
        } else {
            let rest: String = chars[i..chars.len().min(i + 4)].iter().collect();
            match OPERATORS.iter().find(|op| rest.starts_with(*op)) {
                Some(op) => {
                    out.push((*op).to_string());
                    i += op.chars().count();
                }
                None => {
                    out.push(c.to_string());
                    i += 1;
                }
            }
        }
    }
    out
}

fn skip_string(chars: &[char], start: usize) -> usize {
    let quote = chars[start];
    let triple = chars.get(start + 1) == Some(&quote) && chars.get(start + 2) == Some(&quote);
    if triple {
        let mut i = start + 3;
        while i < chars.len() {
            if chars[i] == '\\' {
                i += 2;
                continue;
            }
            if chars[i] == quote && chars.get(i + 1) == Some(&quote) && chars.get(i + 2) == Some(&quote) {
                return i + 3;
            }
            i += 1;
        }
        return chars.len();
    }
    let mut i = start + 1;
    while i < chars.len() {
        match chars[i] {
            '\\' => i += 2,
            c if c == quote => return i + 1,
            '\n' if quote != '`' => return i,
            _ => i += 1,
        }
    }
    chars.len()
}

/// Splits on `_` and camel-case boundaries, lowercasing each piece.
fn split_identifier(ident: &[char], out: &mut Vec<String>) {
    let before = out.len();
    for part in ident.split(|&c| c == '_').filter(|p| !p.is_empty()) {
        let mut start = 0;
        for k in 1..part.len() {
            let (prev, cur) = (part[k - 1], part[k]);
            let next_lower = part.get(k + 1).is_some_and(|c| c.is_lowercase());
            let boundary = cur.is_uppercase()
                && (prev.is_lowercase() || prev.is_ascii_digit() || prev.is_uppercase() && next_lower);
            if boundary {
                out.push(part[start..k].iter().collect::<String>().to_lowercase());
                start = k;
            }
        }
        out.push(part[start..].iter().collect::<String>().to_lowercase());
    }
    if out.len() == before {
        out.push("_".to_string());
    }
}
