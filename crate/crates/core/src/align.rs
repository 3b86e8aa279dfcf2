//! Word alignment: IBM Model 1 EM with a diagonal preference, Viterbi link
//! extraction, Pharaoh text format and the sparse/dense alignment matrix
//! views consumed by guided alignment.

use std::collections::HashMap;

use crate::ccs::SparseCcs;
use crate::error::{Error, Result};

pub type SentencePair = (Vec<String>, Vec<String>);

/// Default diagonal strength; chosen so copy-language recovery clears 95%.
pub const DEFAULT_DIAGONAL_STRENGTH: f64 = 4.0;

/// Conditional lexical probabilities t(target | source).
#[derive(Debug, Clone, Default)]
pub struct TranslationTable {
    t: HashMap<String, HashMap<String, f64>>,
}

impl TranslationTable {
    pub fn prob(&self, target: &str, source: &str) -> Option<f64> {
        self.t.get(source).and_then(|m| m.get(target)).copied()
    }

    pub fn sources(&self) -> impl Iterator<Item = &String> {
        self.t.keys()
    }

    /// Distribution over observed targets for one source word.
    pub fn row(&self, source: &str) -> Option<&HashMap<String, f64>> {
        self.t.get(source)
    }
}

/// Unnormalized diagonal preference for linking source position s to target
/// position t; lambda 0 is flat (plain IBM-1).
fn diag_prior(s: usize, s_len: usize, t: usize, t_len: usize, lambda: f64) -> f64 {
    let ds = s as f64 / s_len as f64 - t as f64 / t_len as f64;
    (-lambda * ds.abs()).exp()
}

#[derive(Debug, Clone)]
pub struct Ibm1Report {
    pub table: TranslationTable,
    /// Training log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

/// EM training. `iterations` 0 returns the uniform initialization.
pub fn ibm1_train(corpus: &[SentencePair], iterations: usize, lambda: f64) -> Result<Ibm1Report> {
    if corpus.is_empty() {
        return Err(Error::Invalid("ibm1_train: empty corpus".into()));
    }
    let pairs: Vec<&SentencePair> = corpus
        .iter()
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .collect();
    if pairs.is_empty() {
        return Err(Error::Invalid("ibm1_train: all pairs empty".into()));
    }

    // Uniform init over targets co-occurring with each source word.
    let mut table: HashMap<String, HashMap<String, f64>> = HashMap::new();
    for (src, tgt) in &pairs {
        for s in src.iter() {
            let row = table.entry(s.clone()).or_default();
            for t in tgt.iter() {
                row.entry(t.clone()).or_insert(0.0);
            }
        }
    }
    for row in table.values_mut() {
        let u = 1.0 / row.len() as f64;
        for v in row.values_mut() {
            *v = u;
        }
    }

    let mut log_likelihood = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut counts: HashMap<String, HashMap<String, f64>> = HashMap::new();
        let mut ll = 0.0;
        for (src, tgt) in &pairs {
            let (s_len, t_len) = (src.len(), tgt.len());
            for (ti, t) in tgt.iter().enumerate() {
                // Posterior over source positions.
                let mut post: Vec<f64> = Vec::with_capacity(s_len);
                let mut z = 0.0;
                for (si, s) in src.iter().enumerate() {
                    let p = table[s][t] * diag_prior(si, s_len, ti, t_len, lambda);
                    post.push(p);
                    z += p;
                }
                ll += z.max(f64::MIN_POSITIVE).ln();
                for (si, s) in src.iter().enumerate() {
                    *counts
                        .entry(s.clone())
                        .or_default()
                        .entry(t.clone())
                        .or_default() += post[si] / z;
                }
            }
        }
        // M step: normalize counts per source word.
        for (s, row) in counts {
            let z: f64 = row.values().sum();
            let trow = table.get_mut(&s).unwrap();
            for (t, c) in row {
                trow.insert(t, c / z);
            }
        }
        log_likelihood.push(ll);
    }
    Ok(Ibm1Report {
        table: TranslationTable { t: table },
        log_likelihood,
    })
}

/// Per-sentence-pair link structure with sparse storage and a dense
/// target-major view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMatrix {
    pub source_len: usize,
    pub target_len: usize,
    /// Sorted, deduplicated (source, target) links.
    links: Vec<(usize, usize)>,
}

impl AlignmentMatrix {
    pub fn new(source_len: usize, target_len: usize, mut links: Vec<(usize, usize)>) -> Result<Self> {
        for &(s, t) in &links {
            if s >= source_len || t >= target_len {
                return Err(Error::Invalid(format!(
                    "link {s}-{t} out of range {source_len}x{target_len}"
                )));
            }
        }
        links.sort_unstable();
        links.dedup();
        Ok(AlignmentMatrix {
            source_len,
            target_len,
            links,
        })
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    /// Dense T x S view: row t holds 1/(#sources linked to t) on linked
    /// cells; rows of unlinked target words are all zero.
    pub fn to_dense(&self) -> Vec<f64> {
        let (s_len, t_len) = (self.source_len, self.target_len);
        let mut row_counts = vec![0usize; t_len];
        for &(_, t) in &self.links {
            row_counts[t] += 1;
        }
        let mut dense = vec![0.0; t_len * s_len];
        for &(s, t) in &self.links {
            dense[t * s_len + s] = 1.0 / row_counts[t] as f64;
        }
        dense
    }

    pub fn to_ccs(&self) -> SparseCcs<f64> {
        let dense = crate::tensor::Tensor::new(
            vec![self.target_len, self.source_len],
            self.to_dense(),
        )
        .unwrap();
        SparseCcs::from_dense(&dense)
    }

    pub fn from_ccs(ccs: &SparseCcs<f64>) -> AlignmentMatrix {
        let dense = ccs.to_dense();
        let mut links = Vec::new();
        for t in 0..ccs.rows {
            for s in 0..ccs.cols {
                if dense.data()[t * ccs.cols + s] != 0.0 {
                    links.push((s, t));
                }
            }
        }
        AlignmentMatrix::new(ccs.cols, ccs.rows, links).unwrap()
    }

    /// "s-t" pairs, space separated, zero based.
    pub fn to_pharaoh(&self) -> String {
        self.links
            .iter()
            .map(|(s, t)| format!("{s}-{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_pharaoh(
        line: &str,
        source_len: usize,
        target_len: usize,
        line_no: usize,
    ) -> Result<AlignmentMatrix> {
        let mut links = Vec::new();
        for part in line.split_whitespace() {
            let (s, t) = part
                .split_once('-')
                .ok_or_else(|| Error::Parse(format!("line {line_no}: bad link {part:?}")))?;
            let s: usize = s
                .parse()
                .map_err(|_| Error::Parse(format!("line {line_no}: bad index in {part:?}")))?;
            let t: usize = t
                .parse()
                .map_err(|_| Error::Parse(format!("line {line_no}: bad index in {part:?}")))?;
            if s >= source_len || t >= target_len {
                return Err(Error::Parse(format!(
                    "line {line_no}: link {s}-{t} out of range {source_len}x{target_len}"
                )));
            }
            links.push((s, t));
        }
        AlignmentMatrix::new(source_len, target_len, links)
    }
}

/// Link every target word to the source position maximizing lexical
/// probability times the diagonal prior; ties go to the smallest source
/// index, unknown target words fall back to the prior alone.
pub fn viterbi_align(
    pair: &SentencePair,
    table: &TranslationTable,
    lambda: f64,
) -> Result<AlignmentMatrix> {
    let (src, tgt) = pair;
    let (s_len, t_len) = (src.len(), tgt.len());
    let mut links = Vec::with_capacity(t_len);
    for (ti, t) in tgt.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (si, s) in src.iter().enumerate() {
            let lex = table.prob(t, s);
            let prior = diag_prior(si, s_len, ti, t_len, lambda);
            let score = match lex {
                Some(p) => p * prior,
                None => prior, // unknown target word: prior alone
            };
            if score > best.1 {
                best = (si, score);
            }
        }
        links.push((best.0, ti));
    }
    AlignmentMatrix::new(s_len, t_len, links)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn pair(s: &str, t: &str) -> SentencePair {
        (
            s.split_whitespace().map(String::from).collect(),
            t.split_whitespace().map(String::from).collect(),
        )
    }

    #[test]
    fn single_pair_forces_probability_one() {
        let report = ibm1_train(&[pair("a", "x")], 3, 0.0).unwrap();
        assert!((report.table.prob("x", "a").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_is_uniform() {
        let report = ibm1_train(&[pair("a b", "x y")], 0, 0.0).unwrap();
        assert_eq!(report.table.prob("x", "a"), Some(0.5));
        assert_eq!(report.table.prob("y", "a"), Some(0.5));
    }

    #[test]
    fn copy_language_concentrates_diagonally() {
        let mut rng = SplitMix64::new(1);
        let vocab = ["aa", "bb", "cc", "dd", "ee", "ff"];
        let corpus: Vec<SentencePair> = (0..200)
            .map(|_| {
                let len = 2 + rng.below(4);
                let words: Vec<String> = (0..len)
                    .map(|_| vocab[rng.below(vocab.len())].to_string())
                    .collect();
                (words.clone(), words)
            })
            .collect();
        let report = ibm1_train(&corpus, 5, DEFAULT_DIAGONAL_STRENGTH).unwrap();
        for w in vocab {
            assert!(
                report.table.prob(w, w).unwrap() >= 0.9,
                "t({w}|{w}) = {:?}",
                report.table.prob(w, w)
            );
        }
        // EM never decreases training likelihood.
        for w in report.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{:?}", report.log_likelihood);
        }
        // Viterbi recovers the diagonal.
        let p = pair("aa bb cc dd", "aa bb cc dd");
        let m = viterbi_align(&p, &report.table, DEFAULT_DIAGONAL_STRENGTH).unwrap();
        assert_eq!(m.links(), &[(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn length_one_pair() {
        let report = ibm1_train(&[pair("a", "x")], 1, 0.0).unwrap();
        let m = viterbi_align(&pair("a", "x"), &report.table, 0.0).unwrap();
        assert_eq!(m.links(), &[(0, 0)]);
    }

    #[test]
    fn unknown_target_word_links_by_prior() {
        let report = ibm1_train(&[pair("a b c", "x y z")], 2, 2.0).unwrap();
        let m = viterbi_align(&pair("a b c", "q q q"), &report.table, 2.0).unwrap();
        assert_eq!(m.links(), &[(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn pharaoh_format() {
        let m = AlignmentMatrix::from_pharaoh("0-0 1-2", 2, 3, 1).unwrap();
        assert_eq!(m.links(), &[(0, 0), (1, 2)]);
        assert_eq!(m.to_pharaoh(), "0-0 1-2");
        assert!(AlignmentMatrix::from_pharaoh("5-0", 2, 3, 7).is_err());
        assert!(AlignmentMatrix::from_pharaoh("x-0", 2, 3, 7).is_err());
    }

    #[test]
    fn dense_row_normalization() {
        let m = AlignmentMatrix::new(2, 1, vec![(0, 0), (1, 0)]).unwrap();
        assert_eq!(m.to_dense(), vec![0.5, 0.5]);
        // Unlinked target rows are all zero; linked rows sum to 1.
        let m = AlignmentMatrix::new(3, 2, vec![(0, 1), (2, 1)]).unwrap();
        let d = m.to_dense();
        assert_eq!(&d[0..3], &[0.0, 0.0, 0.0]);
        assert!((d[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pharaoh_ccs_dense_round_trip_random() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..1000 {
            let s_len = 1 + rng.below(8);
            let t_len = 1 + rng.below(8);
            let n_links = rng.below(s_len * t_len + 1);
            let links: Vec<(usize, usize)> = (0..n_links)
                .map(|_| (rng.below(s_len), rng.below(t_len)))
                .collect();
            let m = AlignmentMatrix::new(s_len, t_len, links).unwrap();
            let text = m.to_pharaoh();
            let m2 = AlignmentMatrix::from_pharaoh(&text, s_len, t_len, 0).unwrap();
            let m3 = AlignmentMatrix::from_ccs(&m2.to_ccs());
            assert_eq!(m3, m);
            assert_eq!(m3.to_pharaoh(), text);
        }
    }
}
