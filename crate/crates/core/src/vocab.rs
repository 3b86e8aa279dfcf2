//! Vocabulary with the fixed id layout model files depend on:
//! 0=padding, 1=<unk>, 2=<s>, 3=</s>, then control tokens, then placeholder
//! tokens, then frequency-ranked words.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Multi-source separator control token.
pub const SEPARATOR: &str = "⟦sep⟧";

/// The politeness register modes selectable via a source control token.
pub const POLITENESS_MODES: [&str; 3] = ["formal", "informal", "neutral"];

/// Control tokens look like "⟦polite:formal⟧" or "⟦sep⟧".
pub fn is_control_token(tok: &str) -> bool {
    tok.starts_with('⟦') && tok.ends_with('⟧')
}

/// Prepend the politeness control token for `mode`. "neutral" opts out and
/// leaves the sentence unchanged; unknown modes are errors. Control tokens
/// are excluded from unknown-word copy replacement by the decoder.
pub fn prepend_control_token(tokens: &[String], mode: &str) -> Result<Vec<String>> {
    if !POLITENESS_MODES.contains(&mode) {
        return Err(Error::Invalid(format!("unknown politeness mode: {mode}")));
    }
    if mode == "neutral" {
        return Ok(tokens.to_vec());
    }
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(format!("⟦polite:{mode}⟧"));
    out.extend(tokens.iter().cloned());
    Ok(out)
}

pub fn is_placeholder_token(tok: &str) -> bool {
    tok.starts_with("__ent_")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Assemble a vocabulary. `words` must already be frequency-ranked;
    /// control and placeholder tokens get the ids right after the reserved
    /// block.
    pub fn build<I, J, K>(control: I, placeholders: J, words: K) -> Vocab
    where
        I: IntoIterator<Item = String>,
        J: IntoIterator<Item = String>,
        K: IntoIterator<Item = String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(control);
        tokens.extend(placeholders);
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Count tokens in an iterator of sentences and rank by frequency
    /// (ties broken lexicographically), keeping at most `max_size` words.
    pub fn from_corpus<'a, I>(sentences: I, max_size: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for sent in sentences {
            for tok in sent {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocab::build(
            [],
            [],
            ranked
                .into_iter()
                .take(max_size)
                .map(|(w, _)| w.to_string()),
        )
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.index.contains_key(tok)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ids(&self, toks: &[String]) -> Vec<u32> {
        toks.iter().map(|t| self.id(t)).collect()
    }

    /// File form: one token per line, starting after the reserved block.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<Vocab> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for line in text.lines() {
            if line.is_empty() {
                return Err(Error::Parse("empty vocabulary line".into()));
            }
            tokens.push(line.to_string());
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }
}
