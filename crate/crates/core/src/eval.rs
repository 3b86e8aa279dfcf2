//! Evaluation: corpus BLEU-4 with brevity penalty and clipped n-gram
//! precisions, add-one-smoothed sentence BLEU (used for distillation
//! selection), and teacher-forced perplexity.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{decode_step_rows, encode_batch, DecState, InferModel, SentenceInput};
use crate::tensor::Scalar;
use crate::vocab;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn lower(sents: &[Vec<String>]) -> Vec<Vec<String>> {
    sents
        .iter()
        .map(|s| s.iter().map(|t| t.to_lowercase()).collect())
        .collect()
}

/// Corpus-level BLEU-4 in [0, 100]: geometric mean of modified (clipped)
/// 1..4-gram precisions times the brevity penalty. Hypotheses and references
/// are whitespace token sequences; no internal re-tokenization.
pub fn corpus_bleu(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    lowercase: bool,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid("empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (hyps, refs);
    let (hypotheses, references) = if lowercase {
        hyps = lower(hypotheses);
        refs = lower(references);
        (&hyps[..], &refs[..])
    } else {
        (hypotheses, references)
    };
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                matched[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_p += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_p / 4.0).exp())
}

/// Sentence-level BLEU-4 with add-one smoothing on every precision and the
/// brevity penalty; stable for short sentences, used to rank n-best
/// candidates against a reference.
pub fn sentence_bleu_smoothed(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let hc = ngram_counts(hypothesis, n);
        let rc = ngram_counts(reference, n);
        let mut matched = 0u64;
        let mut total = 0u64;
        for (gram, &c) in &hc {
            matched += c.min(rc.get(gram).copied().unwrap_or(0));
            total += c;
        }
        log_p += ((matched + 1) as f64 / (total + 1) as f64).ln();
    }
    let bp = if hypothesis.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hypothesis.len() as f64).exp()
    };
    100.0 * bp * (log_p / 4.0).exp()
}

/// Teacher-forced perplexity over (source, target) pairs: exp of the mean
/// per-token negative log likelihood, end-of-sentence included. Errors on an
/// empty corpus or an empty target.
pub fn perplexity<S: Scalar>(
    infer: &InferModel<S>,
    pairs: &[(SentenceInput, SentenceInput)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty evaluation corpus".into()));
    }
    let nf = infer.model.config.tgt_features.len();
    let mut nll = 0.0f64;
    let mut tokens = 0u64;
    for (src, tgt) in pairs {
        if tgt.words.is_empty() {
            return Err(Error::Invalid("empty target sentence".into()));
        }
        let enc = &encode_batch(infer, std::slice::from_ref(src))?[0];
        let mut state = DecState::init(&infer.model.config, enc);
        // inputs: <s>, w_0, ..., w_{T-1}; predictions: w_0, ..., w_{T-1}, </s>
        for k in 0..=tgt.words.len() {
            let (word, feats) = if k == 0 {
                (vocab::BOS, vec![0; nf])
            } else {
                (tgt.words[k - 1], tgt.feat_row(k - 1, nf))
            };
            let (ns, outs) =
                decode_step_rows(infer, &[state], &[(word, feats)], &[enc])?;
            state = ns.into_iter().next().unwrap();
            let target = if k < tgt.words.len() {
                tgt.words[k]
            } else {
                vocab::EOS
            };
            nll -= outs[0].probs[target as usize].as_f64().ln();
            tokens += 1;
        }
    }
    Ok((nll / tokens as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NmtModel};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = vec![toks("the cat sat on the mat"), toks("a b c d")];
        assert_eq!(corpus_bleu(&c, &c, false).unwrap(), 100.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        // "the the the the" vs "the cat": "the" occurs once in the
        // reference, so the clipped unigram matches are 1 of 4
        let h = vec![toks("the the the the")];
        let r = vec![toks("the cat")];
        // higher orders have zero matches -> corpus BLEU 0, so check the
        // precision through a 1-gram-only recomputation
        let hc = ngram_counts(&h[0], 1);
        let rc = ngram_counts(&r[0], 1);
        let matched: u64 = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        let total: u64 = hc.values().sum();
        assert_eq!((matched, total), (1, 4));
        // a reference containing "the" twice yields 2 of 4
        let r2 = toks("the cat the mat");
        let rc2 = ngram_counts(&r2, 1);
        let matched2: u64 = hc
            .iter()
            .map(|(g, &c)| c.min(rc2.get(g).copied().unwrap_or(0)))
            .sum();
        assert_eq!(matched2, 2);
        assert_eq!(corpus_bleu(&h, &r, false).unwrap(), 0.0);
    }

    #[test]
    fn empty_hypothesis_set_is_error() {
        assert!(corpus_bleu(&[], &[], false).is_err());
        assert!(corpus_bleu(&[toks("a")], &[], false).is_err());
    }

    #[test]
    fn brevity_penalty_and_hand_value() {
        // hyp "a b c" (len 3) vs ref "a b c d" (len 4):
        // p1 = 3/3, p2 = 2/2, p3 = 1/1, p4 -> 0 matches -> 0 overall
        let h = vec![toks("a b c")];
        let r = vec![toks("a b c d")];
        assert_eq!(corpus_bleu(&h, &r, false).unwrap(), 0.0);
        // 4-gram present: hyp "a b c d" vs ref "a b c d e"
        let h = vec![toks("a b c d")];
        let r = vec![toks("a b c d e")];
        // precisions all 1 except p1=4/4, p2=3/3, p3=2/2, p4=1/1; BP=exp(1-5/4)
        let want = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((corpus_bleu(&h, &r, false).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn lowercase_flag() {
        let h = vec![toks("The Cat Sat On The Mat Now")];
        let r = vec![toks("the cat sat on the mat now")];
        assert_eq!(corpus_bleu(&h, &r, false).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&h, &r, true).unwrap(), 100.0);
    }

    #[test]
    fn smoothed_sentence_bleu_orders_candidates() {
        let r = toks("the cat sat");
        let close = sentence_bleu_smoothed(&toks("the cat sat"), &r);
        let mid = sentence_bleu_smoothed(&toks("the cat ran"), &r);
        let far = sentence_bleu_smoothed(&toks("dogs bark loud"), &r);
        assert!(close > mid && mid > far);
        assert!(close <= 100.0 && far >= 0.0);
        assert_eq!(sentence_bleu_smoothed(&[], &r), 0.0);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        // zero weights -> generator logits all equal -> uniform over V
        let cfg = ModelConfig::new(8, 8, 4, 4);
        let mut m = NmtModel::<f32>::new(cfg, 1);
        for (_, t) in m.params.iter_mut() {
            for v in t.data.iter_mut() {
                *v = 0.0;
            }
        }
        let infer = InferModel::dense(&m);
        let pairs = vec![(
            SentenceInput::plain(vec![4, 5]),
            SentenceInput::plain(vec![6, 7]),
        )];
        let ppl = perplexity(&infer, &pairs).unwrap();
        assert!((ppl - 8.0).abs() < 1e-4);
    }

    #[test]
    fn perplexity_equals_exp_nll_of_training_graph() {
        use crate::training::{batch_mean_nll_for_eval, TrainExample};
        let m = NmtModel::<f32>::new(ModelConfig::new(8, 8, 4, 4), 7);
        let infer = InferModel::dense(&m);
        let examples = vec![
            TrainExample {
                src: SentenceInput::plain(vec![4, 5]),
                tgt: SentenceInput::plain(vec![6, 7, 4]),
                alignment: None,
            },
            TrainExample {
                src: SentenceInput::plain(vec![6, 7]),
                tgt: SentenceInput::plain(vec![5]),
                alignment: None,
            },
        ];
        let pairs: Vec<(SentenceInput, SentenceInput)> = examples
            .iter()
            .map(|e| (e.src.clone(), e.tgt.clone()))
            .collect();
        let ppl = perplexity(&infer, &pairs).unwrap();
        let (nll, tokens) = batch_mean_nll_for_eval(&m, &examples).unwrap();
        assert!(tokens > 0.0);
        assert!((ppl - nll.exp()).abs() < 1e-4, "{ppl} vs {}", nll.exp());
    }

    #[test]
    fn empty_corpus_errors() {
        let m = NmtModel::<f32>::new(ModelConfig::new(8, 8, 4, 4), 1);
        let infer = InferModel::dense(&m);
        assert!(perplexity(&infer, &[]).is_err());
    }
}
