//! Byte-pair encoding. A merge table is learned from a word-frequency map by
//! repeatedly merging the most frequent adjacent symbol pair; applying it
//! replays the merges in learned order. Non-final pieces carry the "@@"
//! continuation suffix so decoding is a plain join.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    /// Symbol pairs in learning order.
    pub merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#bpe-v1 {}", self.merges.len())?;
        for (a, b) in &self.merges {
            writeln!(w, "{a} {b}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<MergeTable> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty merge table file".into()))??;
        if !header.starts_with("#bpe-v1 ") {
            return Err(Error::Parse(format!("bad merge table header: {header}")));
        }
        let mut merges = Vec::new();
        for (no, line) in lines.enumerate() {
            let line = line?;
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(Error::Parse(format!(
                        "merge table line {}: expected \"a b\"",
                        no + 2
                    )))
                }
            }
        }
        Ok(MergeTable { merges })
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).collect()
}

/// Learn at most `n_merges` merges from a word frequency map. Each step
/// merges the most frequent adjacent pair; ties go to the lexicographically
/// smaller pair.
pub fn bpe_learn(word_freqs: &HashMap<String, u64>, n_merges: usize) -> MergeTable {
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut v: Vec<_> = word_freqs
            .iter()
            .filter(|(w, _)| !w.is_empty())
            .map(|(w, &f)| (word_symbols(w), f))
            .collect();
        v.sort(); // deterministic iteration independent of hash order
        v
    };
    let mut merges = Vec::new();
    for _ in 0..n_merges {
        let mut counts: HashMap<(String, String), u64> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_default() += f;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            // Highest count; ties broken toward the lexicographically
            // smaller pair, hence the reversed pair comparison.
            ca.cmp(cb).then_with(|| pb.cmp(pa))
        });
        let Some(((a, b), _)) = best else { break };
        for (syms, _) in &mut words {
            merge_in_place(syms, &a, &b);
        }
        merges.push((a, b));
    }
    MergeTable { merges }
}

fn merge_in_place(syms: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = merged;
            syms.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Segment a token by replaying merges in table order. All pieces but the
/// last carry the continuation suffix.
pub fn bpe_apply(token: &str, table: &MergeTable) -> Vec<String> {
    if token.is_empty() {
        return Vec::new();
    }
    let mut syms = word_symbols(token);
    for (a, b) in &table.merges {
        merge_in_place(&mut syms, a, b);
    }
    let n = syms.len();
    syms.into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i + 1 < n {
                format!("{s}{CONTINUATION}")
            } else {
                s
            }
        })
        .collect()
}

/// Join continuation pieces back into tokens. A dangling continuation marker
/// at the end of the sequence is recoverable: the marker is stripped and the
/// warning flag returned.
pub fn bpe_decode(pieces: &[String]) -> (Vec<String>, bool) {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut dangling = false;
    for p in pieces {
        if let Some(stem) = p.strip_suffix(CONTINUATION) {
            cur.push_str(stem);
        } else {
            cur.push_str(p);
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        dangling = true;
        tokens.push(cur);
    }
    (tokens, dangling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn freqs(items: &[(&str, u64)]) -> HashMap<String, u64> {
        items.iter().map(|(w, f)| (w.to_string(), *f)).collect()
    }

    #[test]
    fn zero_merges_is_character_segmentation() {
        let table = bpe_learn(&freqs(&[("abc", 3)]), 0);
        assert!(table.merges.is_empty());
        assert_eq!(bpe_apply("abc", &table), ["a@@", "b@@", "c"]);
    }

    #[test]
    fn first_merge_matches_bruteforce_pair_count() {
        let corpus = freqs(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        // Brute-force oracle: count every adjacent character pair.
        let mut counts: HashMap<(char, char), u64> = HashMap::new();
        for (w, f) in &corpus {
            let cs: Vec<char> = w.chars().collect();
            for p in cs.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += f;
            }
        }
        let (&best, &cnt) = counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .unwrap();
        assert_eq!(cnt, 9); // "es" from newest(6) + widest(3)
        let table = bpe_learn(&corpus, 1);
        assert_eq!(
            table.merges[0],
            (best.0.to_string(), best.1.to_string())
        );
    }

    #[test]
    fn tie_broken_lexicographically() {
        // "ab" and "cd" both occur twice; "ab" < "cd".
        let table = bpe_learn(&freqs(&[("ab", 2), ("cd", 2)]), 1);
        assert_eq!(table.merges[0], ("a".into(), "b".into()));
    }

    #[test]
    fn empty_corpus_yields_empty_table() {
        let table = bpe_learn(&HashMap::new(), 10);
        assert!(table.merges.is_empty());
    }

    #[test]
    fn trained_word_becomes_single_piece() {
        let corpus = freqs(&[("hello", 10)]);
        let table = bpe_learn(&corpus, 4); // 4 merges fully fuse 5 chars
        assert_eq!(bpe_apply("hello", &table), ["hello"]);
    }

    #[test]
    fn decode_examples() {
        let (toks, warn) = bpe_decode(&["a@@".into(), "b".into()]);
        assert_eq!(toks, ["ab"]);
        assert!(!warn);
        let (toks, _) = bpe_decode(&["x".into()]);
        assert_eq!(toks, ["x"]);
        let (toks, warn) = bpe_decode(&["a@@".into()]);
        assert_eq!(toks, ["a"]);
        assert!(warn);
    }

    #[test]
    fn training_corpus_has_no_oov_pieces() {
        let corpus = freqs(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let table = bpe_learn(&corpus, 10);
        let mut vocab: std::collections::HashSet<String> = corpus
            .keys()
            .flat_map(|w| w.chars().map(|c| c.to_string()))
            .collect();
        for (a, b) in &table.merges {
            vocab.insert(format!("{a}{b}"));
        }
        for w in corpus.keys() {
            for piece in bpe_apply(w, &table) {
                let stem = piece.strip_suffix(CONTINUATION).unwrap_or(&piece);
                assert!(vocab.contains(stem), "oov piece {piece}");
            }
        }
    }

    #[test]
    fn table_file_round_trip() {
        let corpus = freqs(&[("banana", 4), ("bandana", 2)]);
        let table = bpe_learn(&corpus, 5);
        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        let back = MergeTable::read(&buf[..]).unwrap();
        assert_eq!(back, table);
    }

    proptest! {
        #[test]
        fn apply_decode_round_trip(token in "[a-z@]{1,12}", words in proptest::collection::vec("[a-z]{1,8}", 0..8), n in 0usize..20) {
            let mut corpus = HashMap::new();
            for w in words {
                *corpus.entry(w).or_insert(0u64) += 1;
            }
            let table = bpe_learn(&corpus, n);
            let pieces = bpe_apply(&token, &table);
            let (toks, _) = bpe_decode(&pieces);
            prop_assert_eq!(toks.concat(), token);
        }
    }
}
