//! Beam-search decoding: batched translation, ensembling, placeholder
//! emission constraints, n-gram LM shallow fusion with dictionary OOV
//! injection, and unknown-word replacement.
//!
//! One engine serves every path: rows (sentence, hypothesis) from all active
//! beams are advanced together through `decode_step_rows`, whose arithmetic
//! is row-independent, so batched and sequential decoding are token- and
//! bit-identical.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lm::NGramLM;
use crate::model::{decode_step_rows, encode_batch, DecState, EncOut, InferModel, SentenceInput};
use crate::tensor::Scalar;
use crate::vocab::{self, Vocab};

/// Shallow-fusion settings: log p(x) = log p_LM(x) + beta * log p_NMT(x).
pub struct Fusion<'a> {
    pub lm: &'a NGramLM,
    pub beta: f64,
    /// "source word -> target word" dictionary for OOV injection.
    pub dict: Option<&'a HashMap<String, String>>,
}

pub struct DecodeOptions<'a> {
    pub beam: usize,
    pub max_len: usize,
    pub nbest: usize,
    /// Token ids whose emission is forbidden (placeholder constraint).
    pub banned: Vec<u32>,
    pub fusion: Option<Fusion<'a>>,
    /// Target vocabulary, required for fusion (LM operates on strings).
    pub tgt_vocab: Option<&'a Vocab>,
    /// Source surface tokens per sentence, used for dictionary lookup of
    /// OOV candidates during fusion.
    pub src_tokens: Option<&'a [Vec<String>]>,
}

impl Default for DecodeOptions<'_> {
    fn default() -> Self {
        DecodeOptions {
            beam: 5,
            max_len: 64,
            nbest: 1,
            banned: Vec::new(),
            fusion: None,
            tgt_vocab: None,
            src_tokens: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S: Scalar> {
    pub tokens: Vec<u32>,
    /// Realized words; differs from `tokens` only for dictionary-injected
    /// OOV candidates (token <unk>, word from the dictionary).
    pub words: Vec<Option<String>>,
    pub score: f64,
    /// One decoder state per ensemble model.
    states: Vec<DecState<S>>,
    /// Attention vector per emitted token (step that emitted it).
    pub attn: Vec<Vec<f64>>,
    /// Per step: argmax value of each target feature head.
    pub feats: Vec<Vec<usize>>,
    pub finished: bool,
    /// True when the hypothesis hit max_len without emitting </s>.
    pub forced: bool,
}

/// Final translation of one sentence.
#[derive(Debug, Clone)]
pub struct Translation {
    /// Emitted token ids, without </s>.
    pub tokens: Vec<u32>,
    pub words: Vec<Option<String>>,
    pub score: f64,
    pub attn: Vec<Vec<f64>>,
    /// Feature values per emitted word (prediction is shifted one step: the
    /// head's output at step t+1 labels word t).
    pub feats: Vec<Vec<usize>>,
    pub forced: bool,
}

#[derive(Debug, Clone)]
pub struct SentenceResult {
    pub best: Translation,
    pub nbest: Vec<Translation>,
}

fn to_translation<S: Scalar>(h: &Hypothesis<S>, n_feats: usize) -> Translation {
    let n = h.tokens.len();
    let mut feats = Vec::with_capacity(n);
    for t in 0..n {
        // word t's features come from step t+1; a forced hypothesis has no
        // step after its last word, which then keeps its own step's values
        let step = if t + 1 < h.feats.len() { t + 1 } else { t };
        feats.push(
            h.feats
                .get(step)
                .cloned()
                .unwrap_or_else(|| vec![0; n_feats]),
        );
    }
    Translation {
        tokens: h.tokens.clone(),
        words: h.words.clone(),
        score: h.score,
        attn: h.attn.clone(),
        feats,
        forced: h.forced,
    }
}

/// Candidate ordering: score descending, ties by smaller last token id.
fn better(score_a: f64, tok_a: u32, score_b: f64, tok_b: u32) -> bool {
    score_a > score_b || (score_a == score_b && tok_a < tok_b)
}

struct Beam<S: Scalar> {
    active: Vec<Hypothesis<S>>,
    finished: Vec<Hypothesis<S>>,
}

impl<S: Scalar> Beam<S> {
    fn done(&self, k: usize) -> bool {
        if self.active.is_empty() {
            return true;
        }
        // scores never increase, so once K finished hypotheses all beat the
        // best active one, no extension can change the n-best
        if self.finished.len() >= k {
            let worst_kept = self
                .finished
                .iter()
                .map(|h| h.score)
                .fold(f64::INFINITY, f64::min);
            let best_active = self
                .active
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            return best_active < worst_kept;
        }
        false
    }
}

/// Translate a batch of sentences. `models` is the ensemble in load order
/// (a single model is an ensemble of one); output probabilities are averaged.
/// Sentences are processed in chunks of `batch_size`, longest first, and
/// results restored to input order.
pub fn batch_translate<S: Scalar>(
    models: &[&InferModel<S>],
    sentences: &[SentenceInput],
    batch_size: usize,
    opts: &DecodeOptions,
) -> Result<Vec<SentenceResult>> {
    if models.is_empty() {
        return Err(Error::Invalid("no models".into()));
    }
    if opts.beam == 0 || batch_size == 0 {
        return Err(Error::Invalid("beam and batch size must be >= 1".into()));
    }
    let v = models[0].model.config.tgt_vocab;
    if models.iter().any(|m| m.model.config.tgt_vocab != v) {
        return Err(Error::Invalid(
            "ensemble models must share the target vocabulary".into(),
        ));
    }
    if opts.fusion.is_some() && opts.tgt_vocab.is_none() {
        return Err(Error::Invalid("fusion requires the target vocabulary".into()));
    }

    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by(|&a, &b| {
        sentences[b]
            .words
            .len()
            .cmp(&sentences[a].words.len())
            .then(a.cmp(&b))
    });
    let mut results: Vec<Option<SentenceResult>> = vec![None; sentences.len()];
    for chunk in order.chunks(batch_size) {
        let batch: Vec<SentenceInput> = chunk.iter().map(|&i| sentences[i].clone()).collect();
        let src_toks: Option<Vec<&Vec<String>>> = opts
            .src_tokens
            .map(|all| chunk.iter().map(|&i| &all[i]).collect());
        let chunk_results = translate_chunk(models, &batch, opts, src_toks.as_deref())?;
        for (&i, r) in chunk.iter().zip(chunk_results) {
            results[i] = Some(r);
        }
    }
    Ok(results.into_iter().map(|r| r.unwrap()).collect())
}

/// Convenience wrapper: one sentence, one model set.
pub fn beam_search<S: Scalar>(
    models: &[&InferModel<S>],
    sentence: &SentenceInput,
    opts: &DecodeOptions,
) -> Result<SentenceResult> {
    let mut out = batch_translate(models, std::slice::from_ref(sentence), 1, opts)?;
    Ok(out.remove(0))
}

fn translate_chunk<S: Scalar>(
    models: &[&InferModel<S>],
    batch: &[SentenceInput],
    opts: &DecodeOptions,
    src_tokens: Option<&[&Vec<String>]>,
) -> Result<Vec<SentenceResult>> {
    let m = models.len();
    let nf = models[0].model.config.tgt_features.len();
    let vsize = models[0].model.config.tgt_vocab;
    let k = opts.beam;

    // Per-model encoder outputs, per sentence.
    let mut encs: Vec<Vec<EncOut<S>>> = Vec::with_capacity(m);
    for im in models {
        encs.push(encode_batch(im, batch)?);
    }

    let mut beams: Vec<Beam<S>> = (0..batch.len())
        .map(|i| Beam {
            active: vec![Hypothesis {
                tokens: Vec::new(),
                words: Vec::new(),
                score: 0.0,
                states: (0..m)
                    .map(|mi| DecState::init(&models[mi].model.config, &encs[mi][i]))
                    .collect(),
                attn: Vec::new(),
                feats: Vec::new(),
                finished: false,
                forced: false,
            }],
            finished: Vec::new(),
        })
        .collect();

    for _step in 0..opts.max_len {
        // Gather all active rows across sentences.
        let mut row_sent: Vec<usize> = Vec::new();
        let mut row_hyp: Vec<usize> = Vec::new();
        for (si, beam) in beams.iter().enumerate() {
            if beam.done(k) {
                continue;
            }
            for hi in 0..beam.active.len() {
                row_sent.push(si);
                row_hyp.push(hi);
            }
        }
        if row_sent.is_empty() {
            break;
        }
        let inputs: Vec<(u32, Vec<usize>)> = row_sent
            .iter()
            .zip(&row_hyp)
            .map(|(&si, &hi)| {
                let h = &beams[si].active[hi];
                let word = *h.tokens.last().unwrap_or(&vocab::BOS);
                let feats = h.feats.last().cloned().unwrap_or_else(|| vec![0; nf]);
                (word, feats)
            })
            .collect();

        // Advance every model and average the distributions in load order.
        let mut probs: Vec<Vec<f64>> = vec![vec![0.0; vsize]; row_sent.len()];
        let mut attn_rows: Vec<Vec<f64>> = Vec::new();
        let mut feat_rows: Vec<Vec<usize>> = Vec::new();
        let mut new_states: Vec<Vec<DecState<S>>> = vec![Vec::with_capacity(m); row_sent.len()];
        for (mi, im) in models.iter().enumerate() {
            let states: Vec<DecState<S>> = row_sent
                .iter()
                .zip(&row_hyp)
                .map(|(&si, &hi)| beams[si].active[hi].states[mi].clone())
                .collect();
            let enc_refs: Vec<&EncOut<S>> = row_sent.iter().map(|&si| &encs[mi][si]).collect();
            let (ns, outs) = decode_step_rows(im, &states, &inputs, &enc_refs)?;
            for (r, (st, out)) in ns.into_iter().zip(&outs).enumerate() {
                new_states[r].push(st);
                for (p, &q) in probs[r].iter_mut().zip(&out.probs) {
                    *p += q.as_f64();
                }
            }
            if mi == 0 {
                // attention and feature predictions are read from the first
                // model to keep them well-defined for ensembles
                attn_rows = outs
                    .iter()
                    .map(|o| o.attn.iter().map(|&a| a.as_f64()).collect())
                    .collect();
                feat_rows = outs
                    .iter()
                    .map(|o| {
                        o.feat_probs
                            .iter()
                            .map(|fp| {
                                fp.iter()
                                    .enumerate()
                                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                                    .map(|(i, _)| i)
                                    .unwrap_or(0)
                            })
                            .collect()
                    })
                    .collect();
            }
        }
        if m > 1 {
            for row in probs.iter_mut() {
                for p in row.iter_mut() {
                    *p /= m as f64;
                }
            }
        }

        // Candidate expansion, per sentence, sequentially.
        let mut per_sent_rows: HashMap<usize, Vec<usize>> = HashMap::new();
        for (r, &si) in row_sent.iter().enumerate() {
            per_sent_rows.entry(si).or_default().push(r);
        }
        let mut sent_ids: Vec<usize> = per_sent_rows.keys().copied().collect();
        sent_ids.sort_unstable();
        for si in sent_ids {
            let rows = &per_sent_rows[&si];
            let mut candidates: Vec<Hypothesis<S>> = Vec::new();
            for &r in rows {
                let hi = row_hyp[r];
                let hyp = &beams[si].active[hi];
                expand(
                    hyp,
                    &probs[r],
                    &attn_rows[r],
                    &feat_rows[r],
                    &new_states[r],
                    opts,
                    src_tokens.map(|st| st[si].as_slice()),
                    k,
                    &mut candidates,
                );
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| a.tokens.last().cmp(&b.tokens.last()))
            });
            candidates.truncate(k);
            let beam = &mut beams[si];
            beam.active.clear();
            for c in candidates {
                if c.finished {
                    beam.finished.push(c);
                } else {
                    beam.active.push(c);
                }
            }
        }
    }

    // Force-finish anything still active at max_len.
    for beam in beams.iter_mut() {
        for mut h in beam.active.drain(..) {
            h.finished = true;
            h.forced = true;
            beam.finished.push(h);
        }
        beam.finished.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens.last().cmp(&b.tokens.last()))
        });
    }

    Ok(beams
        .iter()
        .map(|beam| {
            let nbest: Vec<Translation> = beam
                .finished
                .iter()
                .take(opts.nbest.max(1))
                .map(|h| to_translation(h, nf))
                .collect();
        SentenceResult {
                best: nbest[0].clone(),
                nbest,
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn expand<S: Scalar>(
    hyp: &Hypothesis<S>,
    probs: &[f64],
    attn: &[f64],
    feats: &[usize],
    states: &[DecState<S>],
    opts: &DecodeOptions,
    src_tokens: Option<&[String]>,
    k: usize,
    out: &mut Vec<Hypothesis<S>>,
) {
    // Never emit padding, <s>, or banned (placeholder-constrained) tokens.
    let allowed = |tok: u32| -> bool {
        tok != vocab::PAD && tok != vocab::BOS && !opts.banned.contains(&tok)
    };

    // K best NMT candidates among allowed tokens (ties to smaller id).
    let mut top: Vec<u32> = Vec::with_capacity(k);
    for tok in 0..probs.len() as u32 {
        if !allowed(tok) {
            continue;
        }
        let p = probs[tok as usize];
        let pos = top
            .iter()
            .position(|&t| better(p, tok, probs[t as usize], t));
        match pos {
            Some(i) => {
                top.insert(i, tok);
                top.truncate(k);
            }
            None if top.len() < k => top.push(tok),
            None => {}
        }
    }

    let push = |out: &mut Vec<Hypothesis<S>>, tok: u32, word: Option<String>, inc: f64| {
        let mut h = hyp.clone();
        h.score += inc;
        h.states = states.to_vec();
        if tok == vocab::EOS {
            h.finished = true;
            // the </s> step still records attention/features for the shift
            h.attn.push(attn.to_vec());
            h.feats.push(feats.to_vec());
        } else {
            h.tokens.push(tok);
            h.words.push(word);
            h.attn.push(attn.to_vec());
            h.feats.push(feats.to_vec());
        }
        out.push(h);
    };

    match &opts.fusion {
        None => {
            for &tok in &top {
                push(out, tok, None, probs[tok as usize].ln());
            }
        }
        Some(fusion) => {
            let tv = opts.tgt_vocab.expect("fusion requires vocab");
            let context: Vec<&str> = hyp
                .tokens
                .iter()
                .zip(&hyp.words)
                .map(|(&t, w)| w.as_deref().unwrap_or_else(|| tv.token(t)))
                .collect();
            for &tok in &top {
                let w = tv.token(tok);
                let inc =
                    fusion.lm.log_score(&context, w) + fusion.beta * probs[tok as usize].ln();
                push(out, tok, None, inc);
            }
            // dictionary OOV injection: when the NMT argmax is <unk>, offer
            // the dictionary translation of the most-attended source word,
            // scored by the LM alone
            if top.first() == Some(&vocab::UNK) {
                if let (Some(dict), Some(src)) = (fusion.dict, src_tokens) {
                    let amax = attn
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    if let Some(word) = src.get(amax).and_then(|s| dict.get(s)) {
                        let inc = fusion.lm.log_score(&context, word);
                        push(out, vocab::UNK, Some(word.clone()), inc);
                    }
                }
            }
        }
    }
}

/// Token ids that must not be emitted for this source: every placeholder
/// token in the target vocabulary whose type does not occur among the source
/// tokens, plus all control tokens (never generated).
pub fn emission_bans(src_tokens: &[String], tgt_vocab: &Vocab) -> Vec<u32> {
    let mut banned = Vec::new();
    for id in 0..tgt_vocab.len() as u32 {
        let tok = tgt_vocab.token(id);
        if vocab::is_control_token(tok) {
            banned.push(id);
        } else if vocab::is_placeholder_token(tok) && !src_tokens.iter().any(|s| s == tok) {
            banned.push(id);
        }
    }
    banned
}

/// Replace <unk> tokens using attention: copy the most-attended source word,
/// or its dictionary translation when available. Control/separator source
/// tokens are skipped as copy sources. Dictionary-injected words
/// (`words[t]` already set) are kept as-is.
pub fn replace_unknown(
    translation: &Translation,
    src_tokens: &[String],
    dict: Option<&HashMap<String, String>>,
    tgt_vocab: &Vocab,
) -> Vec<String> {
    let mut out = Vec::with_capacity(translation.tokens.len());
    for (t, &tok) in translation.tokens.iter().enumerate() {
        if let Some(w) = &translation.words[t] {
            out.push(w.clone());
            continue;
        }
        if tok != vocab::UNK {
            out.push(tgt_vocab.token(tok).to_string());
            continue;
        }
        let attn = &translation.attn[t];
        let mut best: Option<(usize, f64)> = None;
        for (s, &a) in attn.iter().enumerate() {
            if s < src_tokens.len() && vocab::is_control_token(&src_tokens[s]) {
                continue;
            }
            if best.map(|(_, b)| a > b).unwrap_or(true) {
                best = Some((s, a));
            }
        }
        match best {
            Some((s, _)) if s < src_tokens.len() => {
                let src = &src_tokens[s];
                let w = dict.and_then(|d| d.get(src)).cloned().unwrap_or_else(|| src.clone());
                out.push(w);
            }
            _ => out.push(tgt_vocab.token(vocab::UNK).to_string()),
        }
    }
    out
}

/// Arithmetic-mean combination of output distributions, in model-load order.
pub fn ensemble_mean(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = dists.len();
    if m == 0 {
        return Err(Error::Invalid("empty ensemble".into()));
    }
    let n = dists[0].len();
    if dists.iter().any(|d| d.len() != n) {
        return Err(Error::Invalid("ensemble vocabulary mismatch".into()));
    }
    let mut out = vec![0.0; n];
    for d in dists {
        for (o, &p) in out.iter_mut().zip(d) {
            *o += p;
        }
    }
    for o in out.iter_mut() {
        *o /= m as f64;
    }
    Ok(out)
}

/// N-best line format: "idx ||| tokens ||| score".
pub fn format_nbest(idx: usize, words: &[String], score: f64) -> String {
    format!("{idx} ||| {} ||| {score:.6}", words.join(" "))
}
