//! N-gram language model with stupid-backoff scoring, used for shallow
//! fusion during decoding. The LM vocabulary is independent of (and may
//! exceed) the translation model's vocabulary.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub const BACKOFF: f64 = 0.4;

#[derive(Debug, Clone)]
pub struct NGramLM {
    pub order: usize,
    /// counts[n-1] maps an n-gram (space-joined) to its count.
    counts: Vec<HashMap<String, u64>>,
    vocab: HashSet<String>,
    total_unigrams: u64,
}

fn key(tokens: &[&str]) -> String {
    tokens.join(" ")
}

pub fn lm_train<T: AsRef<str>>(corpus: &[Vec<T>], order: usize) -> Result<NGramLM> {
    if !(1..=5).contains(&order) {
        return Err(Error::Invalid(format!("LM order {order} outside 1..=5")));
    }
    let mut counts: Vec<HashMap<String, u64>> = vec![HashMap::new(); order];
    let mut vocab = HashSet::new();
    let mut total = 0u64;
    for sent in corpus {
        let toks: Vec<&str> = sent.iter().map(|t| t.as_ref()).collect();
        for (i, &t) in toks.iter().enumerate() {
            vocab.insert(t.to_string());
            total += 1;
            for n in 1..=order.min(i + 1) {
                let gram = key(&toks[i + 1 - n..=i]);
                *counts[n - 1].entry(gram).or_default() += 1;
            }
        }
    }
    Ok(NGramLM {
        order,
        counts,
        vocab,
        total_unigrams: total,
    })
}

impl NGramLM {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn count(&self, gram: &[&str]) -> u64 {
        self.counts[gram.len() - 1]
            .get(&key(gram))
            .copied()
            .unwrap_or(0)
    }

    /// Stupid-backoff probability-like score of `token` after `context`
    /// (most recent word last). Unseen unigrams get a uniform floor over the
    /// LM vocabulary, so every token scores finite.
    pub fn score(&self, context: &[&str], token: &str) -> f64 {
        let ctx_len = context.len().min(self.order - 1);
        let ctx = &context[context.len() - ctx_len..];
        let mut penalty = 1.0;
        for start in 0..=ctx.len() {
            let sub = &ctx[start..];
            let mut gram: Vec<&str> = sub.to_vec();
            gram.push(token);
            let num = self.count(&gram);
            if num > 0 {
                let den = if sub.is_empty() {
                    self.total_unigrams
                } else {
                    self.count(sub)
                };
                if den > 0 {
                    return penalty * num as f64 / den as f64;
                }
            }
            penalty *= BACKOFF;
        }
        // penalty already includes one backoff per skipped context level,
        // ending at the unigram level handled above; reaching here means the
        // unigram itself is unseen.
        penalty / BACKOFF * (1.0 / self.vocab.len().max(1) as f64)
    }

    pub fn log_score(&self, context: &[&str], token: &str) -> f64 {
        self.score(context, token).ln()
    }

    /// Text form: header "#ngram-v1 <order>", then "count<TAB>tokens".
    pub fn to_text(&self) -> String {
        let mut s = format!("#ngram-v1 {}\n", self.order);
        for table in &self.counts {
            let mut grams: Vec<(&String, &u64)> = table.iter().collect();
            grams.sort();
            for (gram, count) in grams {
                s.push_str(&format!("{count}\t{gram}\n"));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<NGramLM> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty LM file".into()))?;
        let order: usize = header
            .strip_prefix("#ngram-v1 ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad LM header: {header}")))?;
        if !(1..=5).contains(&order) {
            return Err(Error::Parse(format!("LM order {order} outside 1..=5")));
        }
        let mut counts: Vec<HashMap<String, u64>> = vec![HashMap::new(); order];
        let mut vocab = HashSet::new();
        let mut total = 0u64;
        for (i, line) in lines.enumerate() {
            let (count, gram) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("LM line {}: missing tab", i + 2)))?;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::Parse(format!("LM line {}: bad count", i + 2)))?;
            let n = gram.split(' ').count();
            if n == 0 || n > order {
                return Err(Error::Parse(format!("LM line {}: bad n-gram", i + 2)));
            }
            if n == 1 {
                vocab.insert(gram.to_string());
                total += count;
            }
            counts[n - 1].insert(gram.to_string(), count);
        }
        Ok(NGramLM {
            order,
            counts,
            vocab,
            total_unigrams: total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn deterministic_bigram() {
        // count(a a) = 2, count(a) = 3
        let lm = lm_train(&sents(&["a a a"]), 2).unwrap();
        assert_eq!(lm.score(&["a"], "a"), 2.0 / 3.0);
        assert!((lm.score(&["b"], "a") - BACKOFF).abs() < 1e-12);
    }

    #[test]
    fn unseen_bigram_backs_off() {
        let lm = lm_train(&sents(&["a b", "a c", "b b"]), 2).unwrap();
        // p(b) = 3/6; context "c" never precedes "b" -> 0.4 * p(b)
        let s = lm.score(&["c"], "b");
        assert!((s - BACKOFF * 0.5).abs() < 1e-12);
    }

    #[test]
    fn unseen_unigram_uniform_floor() {
        let lm = lm_train(&sents(&["a b c"]), 3).unwrap();
        let s = lm.score(&[], "zzz");
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
        // with context, two backoff steps then the floor
        let s2 = lm.score(&["a", "b"], "zzz");
        assert!((s2 - BACKOFF * BACKOFF * (1.0 / 3.0)).abs() < 1e-12);
        assert!(lm.log_score(&["a", "b"], "zzz").is_finite());
    }

    /// Order-3 scores match a hand-counted table.
    #[test]
    fn trigram_hand_counts() {
        // corpus: "the cat sat", "the cat ran", "the dog sat"
        let lm = lm_train(&sents(&["the cat sat", "the cat ran", "the dog sat"]), 3).unwrap();
        // count(the cat) = 2, count(the cat sat) = 1
        assert!((lm.score(&["the", "cat"], "sat") - 0.5).abs() < 1e-12);
        assert!((lm.score(&["the", "cat"], "ran") - 0.5).abs() < 1e-12);
        // count(the dog sat) = 1 / count(the dog) = 1
        assert_eq!(lm.score(&["the", "dog"], "sat"), 1.0);
        // unseen trigram "cat dog x" -> backoff to bigram "dog x" unseen ->
        // 0.4 * 0.4 * p(sat) = 0.16 * 2/9
        let s = lm.score(&["cat", "dog"], "the");
        // bigram "dog the" unseen, unigram the = 3/9
        assert!((s - 0.4 * 0.4 * (3.0 / 9.0)).abs() < 1e-12);
        // long context truncated to order-1 words
        assert_eq!(
            lm.score(&["x", "y", "the", "cat"], "sat"),
            lm.score(&["the", "cat"], "sat")
        );
    }

    #[test]
    fn text_round_trip() {
        let lm = lm_train(&sents(&["a b c", "a b d"]), 3).unwrap();
        let text = lm.to_text();
        let lm2 = NGramLM::from_text(&text).unwrap();
        assert_eq!(lm2.to_text(), text);
        assert_eq!(lm.score(&["a", "b"], "c"), lm2.score(&["a", "b"], "c"));
        assert_eq!(lm.score(&[], "zzz"), lm2.score(&[], "zzz"));
        assert!(NGramLM::from_text("garbage\n").is_err());
        assert!(lm_train::<String>(&[], 6).is_err());
    }
}
