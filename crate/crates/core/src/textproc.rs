//! Tokenization, detokenization, url/number pre-protection and the case
//! feature that lets the model run on a lowercased vocabulary.
//!
//! The tokenizer is reversible by construction: joiner flags record where no
//! space separated adjacent tokens, and whitespace runs other than a single
//! space are kept as literal tokens, so `detokenize(tokenize(s)) == s` for
//! every valid UTF-8 input.

use regex::Regex;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const ENT_URL: &str = "__ent_url";
pub const ENT_NUMERIC: &str = "__ent_numeric";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseValue {
    Lower,
    Capitalized,
    Upper,
    Mixed,
    None,
}

impl CaseValue {
    pub fn label(self) -> char {
        match self {
            CaseValue::Lower => 'L',
            CaseValue::Capitalized => 'C',
            CaseValue::Upper => 'U',
            CaseValue::Mixed => 'M',
            CaseValue::None => 'N',
        }
    }

    pub fn from_label(c: char) -> Result<Self> {
        Ok(match c {
            'L' => CaseValue::Lower,
            'C' => CaseValue::Capitalized,
            'U' => CaseValue::Upper,
            'M' => CaseValue::Mixed,
            'N' => CaseValue::None,
            _ => return Err(Error::Parse(format!("unknown case label {c:?}"))),
        })
    }

    /// Index used when the case is fed to the model as a word feature.
    pub fn index(self) -> usize {
        match self {
            CaseValue::Lower => 0,
            CaseValue::Capitalized => 1,
            CaseValue::Upper => 2,
            CaseValue::Mixed => 3,
            CaseValue::None => 4,
        }
    }

    pub const COUNT: usize = 5;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub case: CaseValue,
    /// No space between this token and its left/right neighbour.
    pub joiner_left: bool,
    pub joiner_right: bool,
    /// Placeholder id when the token is a pre-protected entity.
    pub protected: Option<String>,
}

impl Token {
    pub fn word(surface: &str) -> Token {
        Token {
            case: case_of(surface),
            surface: surface.to_string(),
            joiner_left: false,
            joiner_right: false,
            protected: None,
        }
    }
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?|ftp)://[^\s]+").unwrap())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Sign, digits, internal . or , separators each followed by digits.
    RE.get_or_init(|| Regex::new(r"^[+-]?[0-9]+(?:[.,][0-9]+)*$").unwrap())
}

/// Case class of a surface form. `Upper` needs at least two letters; a
/// single uppercase letter counts as `Capitalized`.
pub fn case_of(surface: &str) -> CaseValue {
    let letters: Vec<char> = surface.chars().filter(|c| c.is_alphabetic()).collect();
    let cased: Vec<char> = letters
        .iter()
        .copied()
        .filter(|c| c.is_uppercase() || c.is_lowercase())
        .collect();
    if cased.is_empty() {
        return CaseValue::None;
    }
    if cased.iter().all(|c| c.is_lowercase()) {
        return CaseValue::Lower;
    }
    if cased.iter().all(|c| c.is_uppercase()) && cased.len() >= 2 {
        return CaseValue::Upper;
    }
    if cased[0].is_uppercase() && cased[1..].iter().all(|c| c.is_lowercase()) {
        return CaseValue::Capitalized;
    }
    CaseValue::Mixed
}

/// Split text into tokens. URLs and standalone numbers are protected (kept
/// whole and tagged with their placeholder id); other runs split between
/// alphanumeric sequences and individual punctuation characters.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens: Vec<Token> = Vec::new();
    // True when no plain single space separated the upcoming token from the
    // previous one.
    let mut joined_to_prev = false;
    // A single plain space seen after a token, waiting for a following token
    // to act as the default separator.
    let mut pending_sep = false;
    let mut pos = 0;
    let bytes_len = text.len();

    while pos < bytes_len {
        let rest = &text[pos..];
        let c = rest.chars().next().unwrap();
        if c.is_whitespace() {
            // Consume the whitespace run.
            let end = rest
                .char_indices()
                .find(|(_, ch)| !ch.is_whitespace())
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            let run = &rest[..end];
            if run == " " && !tokens.is_empty() {
                joined_to_prev = false;
                pending_sep = true;
            } else {
                // Literal whitespace token, glued on both sides.
                tokens.push(Token {
                    surface: run.to_string(),
                    case: CaseValue::None,
                    joiner_left: true,
                    joiner_right: true,
                    protected: None,
                });
                joined_to_prev = true;
                pending_sep = false;
            }
            pos += end;
            continue;
        }
        // Non-whitespace run.
        let end = rest
            .char_indices()
            .find(|(_, ch)| ch.is_whitespace())
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let run = &rest[..end];
        let start_idx = tokens.len();
        split_run(run, &mut tokens);
        if let Some(tok) = tokens.get_mut(start_idx) {
            tok.joiner_left = joined_to_prev;
        }
        joined_to_prev = true; // next gap decides
        pending_sep = false;
        pos += end;
    }
    if pending_sep {
        // Trailing single space with no token after it: keep it literally.
        tokens.push(Token {
            surface: " ".to_string(),
            case: CaseValue::None,
            joiner_left: true,
            joiner_right: true,
            protected: None,
        });
    }
    tokens
}

/// Split one whitespace-free run into tokens, appending to `out`. Tokens
/// created at interior split points carry joiner flags on both sides of the
/// split.
fn split_run(run: &str, out: &mut Vec<Token>) {
    if number_re().is_match(run) {
        out.push(Token {
            surface: run.to_string(),
            case: CaseValue::None,
            joiner_left: false,
            joiner_right: false,
            protected: Some(ENT_NUMERIC.to_string()),
        });
        return;
    }
    let mut pieces: Vec<(String, Option<String>)> = Vec::new();
    let mut last = 0;
    for m in url_re().find_iter(run) {
        if m.start() > last {
            split_plain(&run[last..m.start()], &mut pieces);
        }
        pieces.push((m.as_str().to_string(), Some(ENT_URL.to_string())));
        last = m.end();
    }
    if last < run.len() {
        split_plain(&run[last..], &mut pieces);
    }
    let n = pieces.len();
    for (i, (surface, protected)) in pieces.into_iter().enumerate() {
        out.push(Token {
            case: case_of(&surface),
            surface,
            joiner_left: i > 0,
            joiner_right: i + 1 < n,
            protected,
        });
    }
}

/// Alphanumeric sequences stay together; every other character is a token.
fn split_plain(seg: &str, pieces: &mut Vec<(String, Option<String>)>) {
    let mut word = String::new();
    for c in seg.chars() {
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            if !word.is_empty() {
                pieces.push((std::mem::take(&mut word), None));
            }
            pieces.push((c.to_string(), None));
        }
    }
    if !word.is_empty() {
        pieces.push((word, None));
    }
}

fn escape_surface(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '￭' => out.push_str("\\j"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape_surface(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('s') => out.push(' '),
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('j') => out.push('￭'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// One-line text form of a token sequence: space-separated surfaces with a
/// leading/trailing "￭" joiner mark where no space separated neighbours
/// (space, tab, newline and ￭ inside surfaces are backslash-escaped).
pub fn tokens_to_line(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| {
            let mut s = String::new();
            if t.joiner_left {
                s.push('￭');
            }
            s.push_str(&escape_surface(&t.surface));
            if t.joiner_right {
                s.push('￭');
            }
            s
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Inverse of [`tokens_to_line`]; case and protection classes are
/// recomputed from the surfaces.
pub fn tokens_from_line(line: &str) -> Vec<Token> {
    let mut out = Vec::new();
    if line.is_empty() {
        return out;
    }
    for piece in line.split(' ') {
        let joiner_left = piece.starts_with('￭');
        let mut body = piece.strip_prefix('￭').unwrap_or(piece);
        let joiner_right = body.ends_with('￭');
        body = body.strip_suffix('￭').unwrap_or(body);
        let surface = unescape_surface(body);
        // numbers are only protected when they formed a whole run (tokenize
        // never protects digits split off from other characters)
        let whole_url = url_re()
            .find(&surface)
            .map(|m| m.start() == 0 && m.end() == surface.len())
            .unwrap_or(false);
        let protected = if !joiner_left && !joiner_right && number_re().is_match(&surface) {
            Some(ENT_NUMERIC.to_string())
        } else if whole_url {
            Some(ENT_URL.to_string())
        } else {
            None
        };
        out.push(Token {
            case: case_of(&surface),
            surface,
            joiner_left,
            joiner_right,
            protected,
        });
    }
    out
}

/// Inverse of [`tokenize`] on its own output.
pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 && !tok.joiner_left && !tokens[i - 1].joiner_right {
            out.push(' ');
        }
        out.push_str(&tok.surface);
    }
    out
}

/// Lowercase tokens and peel the case feature off. Mixed-case tokens keep
/// their original surface.
pub fn case_split(tokens: &[Token]) -> (Vec<Token>, Vec<CaseValue>) {
    let mut lowered = Vec::with_capacity(tokens.len());
    let mut cases = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let case = tok.case;
        let mut t = tok.clone();
        if matches!(
            case,
            CaseValue::Lower | CaseValue::Capitalized | CaseValue::Upper
        ) {
            t.surface = tok.surface.to_lowercase();
        }
        lowered.push(t);
        cases.push(case);
    }
    (lowered, cases)
}

/// Restore surface case from the feature sequence. Inverse of [`case_split`]
/// for tokens whose case is not `Mixed`.
pub fn case_restore(tokens: &[Token], cases: &[CaseValue]) -> Result<Vec<Token>> {
    if tokens.len() != cases.len() {
        return Err(Error::Invalid(format!(
            "case_restore: {} tokens vs {} features",
            tokens.len(),
            cases.len()
        )));
    }
    let mut out = Vec::with_capacity(tokens.len());
    for (tok, &case) in tokens.iter().zip(cases) {
        let mut t = tok.clone();
        t.surface = apply_case(&tok.surface, case);
        t.case = case;
        out.push(t);
    }
    Ok(out)
}

pub fn apply_case(lower: &str, case: CaseValue) -> String {
    match case {
        CaseValue::Lower | CaseValue::None | CaseValue::Mixed => lower.to_string(),
        CaseValue::Upper => lower.to_uppercase(),
        CaseValue::Capitalized => {
            // Uppercase the first letter only.
            let mut done = false;
            lower
                .chars()
                .flat_map(|c| {
                    if !done && c.is_alphabetic() {
                        done = true;
                        c.to_uppercase().collect::<Vec<_>>()
                    } else {
                        vec![c]
                    }
                })
                .collect()
        }
    }
}
