//! Training: the autodiff forward pass for a batch, the loss terms
//! (decoder NLL, guided alignment, feature prediction), and the SGD loop
//! with gradient clipping, learning-rate decay, and guided-weight decay.

use std::collections::BTreeMap;
use std::time::Instant;

use indexmap::IndexMap;

use crate::align::AlignmentMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, NmtModel, SentenceInput};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::vocab;

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub src: SentenceInput,
    /// Target words without <s>/</s>; they are added internally.
    pub tgt: SentenceInput,
    pub alignment: Option<AlignmentMatrix>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// First epoch (1-based) at which the learning rate is multiplied by
    /// `lr_decay` each epoch.
    pub start_decay_epoch: usize,
    pub clip_norm: f64,
    /// Initial guided-alignment weight; 0 disables the term.
    pub w_ga: f64,
    pub w_ga_decay: f64,
    pub lambda_feat: f64,
    pub seed: u64,
    pub log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1.0,
            lr_decay: 0.7,
            start_decay_epoch: 9,
            clip_norm: 5.0,
            w_ga: 0.0,
            w_ga_decay: 0.9,
            lambda_feat: 1.0,
            seed: 1,
            log: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub ppl: f64,
    pub l_dec: f64,
    pub l_ga: f64,
    pub l_feat: f64,
    pub lr: f64,
    pub w_ga: f64,
    pub seconds: f64,
}

impl EpochReport {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {} ppl {:.4} L_dec {:.4} L_ga {:.4} L_feat {:.4} lr {:.4} w_ga {:.4} {:.2}s",
            self.epoch, self.ppl, self.l_dec, self.l_ga, self.l_feat, self.lr, self.w_ga,
            self.seconds
        )
    }
}

/// Mean negative log-likelihood per non-masked position, from probability
/// rows. Pure helper shared by the evaluator and tests.
pub fn nll_loss(prob_rows: &[Vec<f64>], refs: &[u32], mask: &[bool]) -> Result<f64> {
    if prob_rows.len() != refs.len() || refs.len() != mask.len() {
        return Err(Error::Shape("nll_loss length mismatch".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((row, &r), &m) in prob_rows.iter().zip(refs).zip(mask) {
        if !m {
            continue;
        }
        let p = row
            .get(r as usize)
            .ok_or_else(|| Error::Shape("reference id out of vocabulary".into()))?;
        total -= p.max(f64::MIN_POSITIVE).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("nll_loss over zero positions".into()));
    }
    Ok(total / n as f64)
}

/// Guided alignment loss between a reference matrix A and attention weights
/// alpha, both (target_len x source_len) row-major: (1/T) sum over aligned
/// target rows of the squared differences. Target rows with no reference
/// link are excluded from both the sum and T.
pub fn guided_alignment_loss(a: &[f64], alpha: &[f64], t_len: usize, s_len: usize) -> Result<f64> {
    if a.len() != t_len * s_len || alpha.len() != t_len * s_len {
        return Err(Error::Shape("guided_alignment_loss shape mismatch".into()));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for t in 0..t_len {
        let arow = &a[t * s_len..(t + 1) * s_len];
        if arow.iter().all(|&v| v == 0.0) {
            continue;
        }
        rows += 1;
        for s in 0..s_len {
            let d = arow[s] - alpha[t * s_len + s];
            total += d * d;
        }
    }
    if rows == 0 {
        return Err(Error::Invalid("no aligned target rows".into()));
    }
    Ok(total / rows as f64)
}

/// Loss variables for one batch, plus token count for perplexity.
pub struct BatchLoss {
    pub total: Var,
    pub l_dec: Var,
    pub l_ga: Option<Var>,
    pub l_feat: Option<Var>,
    pub tokens: usize,
}

/// Register every model parameter in a graph (clones the tensors).
pub fn register_params<S: Scalar>(g: &mut Graph<S>, params: &IndexMap<String, Tensor<S>>) {
    for (name, t) in params {
        g.param(name, t.clone());
    }
}

fn lstm_graph_step<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let w = g.param_var(&format!("{prefix}.w")).unwrap();
    let u = g.param_var(&format!("{prefix}.u")).unwrap();
    let b = g.param_var(&format!("{prefix}.b")).unwrap();
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    let pre = g.add_bias(s, b)?;
    let hsz = g.value(h).cols();
    let ig = g.slice_cols(pre, 0, hsz)?;
    let fg = g.slice_cols(pre, hsz, 2 * hsz)?;
    let gg = g.slice_cols(pre, 2 * hsz, 3 * hsz)?;
    let og = g.slice_cols(pre, 3 * hsz, 4 * hsz)?;
    let ig = g.sigmoid(ig);
    let fg = g.sigmoid(fg);
    let gg = g.tanh(gg);
    let og = g.sigmoid(og);
    let fc = g.mul(fg, c)?;
    let igg = g.mul(ig, gg)?;
    let nc = g.add(fc, igg)?;
    let tc = g.tanh(nc);
    let nh = g.mul(og, tc)?;
    Ok((nh, nc))
}

/// Embedding lookup plus the scaled feature one-hot block as a constant.
fn embed_step<S: Scalar>(
    g: &mut Graph<S>,
    embed_name: &str,
    words: &[u32],
    feat_block: Option<Tensor<S>>,
) -> Result<Var> {
    let embed = g
        .param_var(embed_name)
        .ok_or_else(|| Error::Invalid(format!("missing {embed_name}")))?;
    let idx: Vec<usize> = words.iter().map(|&w| w as usize).collect();
    let e = g.rows_select(embed, &idx)?;
    match feat_block {
        Some(fb) => {
            let f = g.leaf(fb);
            g.concat_cols(&[e, f])
        }
        None => Ok(e),
    }
}

fn feat_block<S: Scalar>(
    cfg: &ModelConfig,
    specs: &[crate::model::FeatureSpec],
    rows: &[Vec<usize>],
) -> Option<Tensor<S>> {
    let _ = cfg;
    if specs.is_empty() {
        return None;
    }
    let width: usize = specs.iter().map(|f| f.n_values).sum();
    let mut data = vec![S::zero(); rows.len() * width];
    for (r, feats) in rows.iter().enumerate() {
        let mut off = 0;
        for (spec, &v) in specs.iter().zip(feats) {
            data[r * width + off + v] = S::from_f64(1.0 / spec.n_values as f64);
            off += spec.n_values;
        }
    }
    Some(Tensor::new(vec![rows.len(), width], data).unwrap())
}

/// Build the full forward pass and loss for one batch. All source sentences
/// in the batch must have the same length (bucketed batching); targets are
/// padded and masked. Parameters must already be registered in `g`.
pub fn build_batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    batch: &[TrainExample],
    w_ga: f64,
    lambda_feat: f64,
    dropout: f64,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let b = batch.len();
    let h = cfg.rnn_size;
    let s_len = batch[0].src.words.len();
    if batch.iter().any(|e| e.src.words.len() != s_len) {
        return Err(Error::Invalid(
            "batch mixes source lengths; bucket first".into(),
        ));
    }
    if s_len == 0 || batch.iter().any(|e| e.tgt.words.is_empty()) {
        return Err(Error::Invalid("empty sentence in batch".into()));
    }
    if s_len > cfg.max_len {
        return Err(Error::Invalid(format!(
            "source length {s_len} exceeds maximum {}",
            cfg.max_len
        )));
    }
    let nf_src = cfg.src_features.len();
    let nf_tgt = cfg.tgt_features.len();
    let use_ga = w_ga > 0.0 && batch.iter().all(|e| e.alignment.is_some());

    // ---- encoder ----
    let zeros = |g: &mut Graph<S>| g.leaf(Tensor::zeros(vec![b, h]));
    let mut step_inputs: Vec<Var> = Vec::with_capacity(s_len);
    for s in 0..s_len {
        let words: Vec<u32> = batch.iter().map(|e| e.src.words[s]).collect();
        let rows: Vec<Vec<usize>> = batch.iter().map(|e| e.src.feat_values(s, nf_src)).collect();
        let fb = feat_block(cfg, &cfg.src_features, &rows);
        step_inputs.push(embed_step(g, "src_embed", &words, fb)?);
    }

    // One LSTM layer over per-step inputs in one direction.
    let run_layer = |g: &mut Graph<S>,
                     name: &str,
                     layer_in: &[Var],
                     rev: bool,
                     dropped: bool|
     -> Result<Vec<Var>> {
        let mut hv = zeros(g);
        let mut cv = zeros(g);
        let mut outs = vec![hv; s_len];
        let order: Vec<usize> = if rev {
            (0..s_len).rev().collect()
        } else {
            (0..s_len).collect()
        };
        for &s in &order {
            let xin = if dropped && dropout > 0.0 {
                g.dropout(layer_in[s], dropout)
            } else {
                layer_in[s]
            };
            let (nh, nc) = lstm_graph_step(g, name, xin, hv, cv)?;
            hv = nh;
            cv = nc;
            outs[s] = nh;
        }
        Ok(outs)
    };
    // Each layer is bidirectional on its own: forward and backward outputs
    // are summed per position and the sum feeds the next layer.
    let mut layer_in = step_inputs.clone();
    for l in 0..cfg.num_layers {
        let fwd = run_layer(g, &format!("enc.l{l}"), &layer_in, false, l > 0)?;
        layer_in = if cfg.bidirectional {
            let bwd = run_layer(g, &format!("enc_rev.l{l}"), &layer_in, true, l > 0)?;
            fwd.iter()
                .zip(&bwd)
                .map(|(&f, &bk)| g.add(f, bk))
                .collect::<Result<_>>()?
        } else {
            fwd
        };
    }
    let enc_top = layer_in;
    // time-major (s_len * b, h), row s*b + i
    let enc_cat = g.concat_rows(&enc_top)?;

    // ---- decoder ----
    let t_max = batch.iter().map(|e| e.tgt.words.len()).max().unwrap();
    let steps = t_max + 1; // inputs <s>,t0..t_{n-1}; refs t0..t_{n-1},</s>
    let mut hs: Vec<Var> = (0..cfg.num_layers).map(|_| zeros(g)).collect();
    let mut cs: Vec<Var> = (0..cfg.num_layers).map(|_| zeros(g)).collect();
    let mut input_feed = zeros(g);

    let mut logit_steps = Vec::with_capacity(steps);
    let mut alpha_steps = Vec::with_capacity(steps);
    let mut feat_prob_steps: Vec<Vec<Var>> = vec![Vec::with_capacity(steps); nf_tgt];
    let mut targets: Vec<usize> = Vec::with_capacity(steps * b);
    let mut mask: Vec<bool> = Vec::with_capacity(steps * b);

    let attn_w = g.param_var("attn.w").unwrap();
    let attn_comb = g.param_var("attn.comb").unwrap();
    let gen_w = g.param_var("gen.w").unwrap();
    let gen_b = g.param_var("gen.b").unwrap();

    for k in 0..steps {
        let words: Vec<u32> = batch
            .iter()
            .map(|e| {
                if k == 0 {
                    vocab::BOS
                } else if k - 1 < e.tgt.words.len() {
                    e.tgt.words[k - 1]
                } else {
                    vocab::PAD
                }
            })
            .collect();
        // input features follow the input word (none for <s>/padding)
        let frows: Vec<Vec<usize>> = batch
            .iter()
            .map(|e| {
                if k >= 1 && k - 1 < e.tgt.words.len() {
                    e.tgt.feat_values(k - 1, nf_tgt)
                } else {
                    vec![0; nf_tgt]
                }
            })
            .collect();
        let fb = feat_block(cfg, &cfg.tgt_features, &frows);
        let emb = embed_step(g, "tgt_embed", &words, fb)?;
        let mut x = g.concat_cols(&[emb, input_feed])?;
        for l in 0..cfg.num_layers {
            let xin = if l > 0 && dropout > 0.0 {
                g.dropout(x, dropout)
            } else {
                x
            };
            let (nh, nc) = lstm_graph_step(g, &format!("dec.l{l}"), xin, hs[l], cs[l])?;
            hs[l] = nh;
            cs[l] = nc;
            x = nh;
        }
        let top = hs[cfg.num_layers - 1];
        let q = g.matmul(top, attn_w)?;
        let scores = g.batched_dot(q, enc_cat)?;
        let alpha = g.softmax_rows(scores, None)?;
        let ctx = g.batched_weighted_sum(alpha, enc_cat)?;
        let cat = g.concat_cols(&[ctx, top])?;
        let pre = g.matmul(cat, attn_comb)?;
        let hhat = g.tanh(pre);
        input_feed = hhat;
        let gin = if dropout > 0.0 {
            g.dropout(hhat, dropout)
        } else {
            hhat
        };
        let lg = g.matmul(gin, gen_w)?;
        let lg = g.add_bias(lg, gen_b)?;
        logit_steps.push(lg);
        alpha_steps.push(alpha);
        for (fi, f) in cfg.tgt_features.iter().enumerate() {
            let fw = g.param_var(&format!("feat.{}.w", f.name)).unwrap();
            let fbias = g.param_var(&format!("feat.{}.b", f.name)).unwrap();
            let fl = g.matmul(gin, fw)?;
            let fl = g.add_bias(fl, fbias)?;
            let fp = g.softmax_rows(fl, None)?;
            feat_prob_steps[fi].push(fp);
        }
        for e in batch {
            let n = e.tgt.words.len();
            if k < n {
                targets.push(e.tgt.words[k] as usize);
                mask.push(true);
            } else if k == n {
                targets.push(vocab::EOS as usize);
                mask.push(true);
            } else {
                targets.push(vocab::PAD as usize);
                mask.push(false);
            }
        }
    }

    let logits = g.concat_rows(&logit_steps)?;
    let l_dec = g.mean_nll(logits, &targets, &mask)?;
    let tokens = mask.iter().filter(|&&m| m).count();

    // ---- guided alignment ----
    let l_ga = if use_ga {
        let alphas = g.concat_rows(&alpha_steps)?;
        let mut target = vec![S::zero(); steps * b * s_len];
        let mut row_w = vec![S::zero(); steps * b];
        for (i, e) in batch.iter().enumerate() {
            let am = e.alignment.as_ref().unwrap();
            let dense = am.to_dense(); // (t_len, s_len) row-major
            let t_len = e.tgt.words.len();
            let aligned_rows = (0..t_len)
                .filter(|&t| dense[t * s_len..(t + 1) * s_len].iter().any(|&v| v != 0.0))
                .count();
            if aligned_rows == 0 {
                continue;
            }
            let w = 1.0 / (b as f64 * aligned_rows as f64);
            for t in 0..t_len {
                let row = &dense[t * s_len..(t + 1) * s_len];
                if row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let r = t * b + i; // step t emits word t
                row_w[r] = S::from_f64(w);
                for s in 0..s_len {
                    target[r * s_len + s] = S::from_f64(row[s]);
                }
            }
        }
        Some(g.sq_diff_const(alphas, &target, &row_w)?)
    } else {
        None
    };

    // ---- feature prediction (shifted one step) ----
    let l_feat = if nf_tgt > 0 {
        let mut terms: Vec<(S, Var)> = Vec::new();
        for (fi, f) in cfg.tgt_features.iter().enumerate() {
            let probs = g.concat_rows(&feat_prob_steps[fi])?;
            let n = f.n_values;
            let mut target = vec![S::zero(); steps * b * n];
            let mut row_w = vec![S::zero(); steps * b];
            let mut active = 0usize;
            for (i, e) in batch.iter().enumerate() {
                let t_len = e.tgt.words.len();
                // the feature of word k-1 is predicted at step k; the final
                // (</s>) step carries the last word's feature
                for k in 1..=t_len {
                    let r = k * b + i;
                    let v = e.tgt.feat_values(k - 1, nf_tgt)[fi];
                    target[r * n + v] = S::from_f64(1.0 / n as f64);
                    row_w[r] = S::one();
                    active += 1;
                }
            }
            let wv = S::from_f64(1.0 / active.max(1) as f64);
            for w in row_w.iter_mut() {
                if *w != S::zero() {
                    *w = wv;
                }
            }
            let t = g.sq_diff_const(probs, &target, &row_w)?;
            terms.push((S::one(), t));
        }
        Some(g.scalar_mix(&terms)?)
    } else {
        None
    };

    // ---- combine ----
    let mut terms: Vec<(S, Var)> = Vec::new();
    match l_ga {
        Some(ga) => {
            terms.push((S::from_f64(w_ga), ga));
            terms.push((S::from_f64(1.0 - w_ga), l_dec));
        }
        None => terms.push((S::one(), l_dec)),
    }
    if let Some(lf) = l_feat {
        terms.push((S::from_f64(lambda_feat), lf));
    }
    let total = g.scalar_mix(&terms)?;
    Ok(BatchLoss {
        total,
        l_dec,
        l_ga,
        l_feat,
        tokens,
    })
}

/// Group example indices into same-source-length batches of at most
/// `batch_size`, in a deterministic order.
pub fn bucket_batches(examples: &[TrainExample], batch_size: usize) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        buckets.entry(e.src.words.len()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, idxs) in buckets {
        for chunk in idxs.chunks(batch_size.max(1)) {
            batches.push(chunk.to_vec());
        }
    }
    batches
}

/// Plain SGD with global-norm gradient clipping. Pruned positions and frozen
/// embedding rows receive no update.
fn sgd_step<S: Scalar>(model: &mut NmtModel<S>, g: &Graph<S>, lr: f64, clip: f64) {
    let mut sq = 0.0f64;
    for name in model.params.keys() {
        if let Some(grad) = g.param_grad(name) {
            for &v in grad {
                let f = v.as_f64();
                sq += f * f;
            }
        }
    }
    let norm = sq.sqrt();
    let scale = if clip > 0.0 && norm > clip {
        lr * clip / norm
    } else {
        lr
    };
    let names: Vec<String> = model.params.keys().cloned().collect();
    for name in names {
        let Some(grad) = g.param_grad(&name) else {
            continue;
        };
        let mask = model.masks.get(&name).cloned();
        let frozen = model.frozen_rows.get(&name).cloned();
        let t = model.params.get_mut(&name).unwrap();
        let cols = if t.dims.len() == 2 { t.dims[1] } else { t.data.len() };
        for (i, v) in t.data.iter_mut().enumerate() {
            if let Some(m) = &mask {
                if !m[i] {
                    continue;
                }
            }
            if let Some(fr) = &frozen {
                if fr[i / cols] {
                    continue;
                }
            }
            *v = *v - S::from_f64(scale) * grad[i];
        }
    }
}

/// Train in place; returns one report per epoch. Repeatable: the same seed
/// and corpus give bit-identical parameters.
pub fn train<S: Scalar>(
    model: &mut NmtModel<S>,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let batches = bucket_batches(examples, cfg.batch_size);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut lr = cfg.lr;
    let mut w_ga = cfg.w_ga;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if epoch > 1 {
            if epoch >= cfg.start_decay_epoch {
                lr *= cfg.lr_decay;
            }
            if cfg.w_ga > 0.0 {
                w_ga *= cfg.w_ga_decay;
            }
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..batches.len()).collect();
        rng.shuffle(&mut order);
        let mut dec_sum = 0.0;
        let mut dec_tokens = 0usize;
        let mut ga_sum = 0.0;
        let mut feat_sum = 0.0;
        let mut n_batches = 0usize;
        for &bi in &order {
            let batch: Vec<TrainExample> =
                batches[bi].iter().map(|&i| examples[i].clone()).collect();
            let mut g: Graph<S> = Graph::new(rng.next_u64());
            register_params(&mut g, &model.params);
            let loss = build_batch_loss(&mut g, &model.config, &batch, w_ga, cfg.lambda_feat,
                model.config.dropout)?;
            g.backward(loss.total)?;
            dec_sum += g.value(loss.l_dec).data[0].as_f64() * loss.tokens as f64;
            dec_tokens += loss.tokens;
            if let Some(ga) = loss.l_ga {
                ga_sum += g.value(ga).data[0].as_f64();
            }
            if let Some(lf) = loss.l_feat {
                feat_sum += g.value(lf).data[0].as_f64();
            }
            n_batches += 1;
            sgd_step(model, &g, lr, cfg.clip_norm);
        }
        let l_dec = dec_sum / dec_tokens as f64;
        let report = EpochReport {
            epoch,
            ppl: l_dec.exp(),
            l_dec,
            l_ga: ga_sum / n_batches as f64,
            l_feat: feat_sum / n_batches as f64,
            lr,
            w_ga,
            seconds: start.elapsed().as_secs_f64(),
        };
        if cfg.log {
            eprintln!("{}", report.log_line());
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Token-weighted mean decoder NLL over a corpus via the training graph
/// (no dropout, no auxiliary losses). Returns (mean nll, token count);
/// exp of the mean is the corpus perplexity.
pub fn batch_mean_nll_for_eval<S: Scalar>(
    model: &NmtModel<S>,
    examples: &[TrainExample],
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty evaluation corpus".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0.0;
    for idxs in bucket_batches(examples, 16) {
        let batch: Vec<TrainExample> = idxs.iter().map(|&i| examples[i].clone()).collect();
        let mut g = Graph::new(0);
        register_params(&mut g, &model.params);
        let loss = build_batch_loss(&mut g, &model.config, &batch, 0.0, 0.0, 0.0)?;
        nll += g.value(loss.l_dec).data[0].as_f64() * loss.tokens as f64;
        tokens += loss.tokens as f64;
    }
    Ok((nll / tokens, tokens))
}

/// Build a synthetic distillation corpus: decode each source with the
/// teacher, keep the n-best hypothesis with the highest add-one-smoothed
/// sentence BLEU against the reference, and pair it with the source.
/// Sentences whose n-best list comes back empty are skipped with a warning;
/// the skip count is returned alongside the corpus.
pub fn distill_prepare<S: Scalar>(
    teacher: &crate::model::InferModel<S>,
    sources: &[SentenceInput],
    references: &[SentenceInput],
    n_best: usize,
    batch_size: usize,
    max_len: usize,
) -> Result<(Vec<TrainExample>, usize)> {
    use crate::decoding::{batch_translate, DecodeOptions};
    if sources.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} sources vs {} references",
            sources.len(),
            references.len()
        )));
    }
    if n_best == 0 {
        return Err(Error::Invalid("n_best must be >= 1".into()));
    }
    let opts = DecodeOptions {
        beam: n_best,
        nbest: n_best,
        max_len,
        ..DecodeOptions::default()
    };
    let results = batch_translate(&[teacher], sources, batch_size.max(1), &opts)?;
    let as_strings = |ids: &[u32]| -> Vec<String> { ids.iter().map(|t| t.to_string()).collect() };
    let mut corpus = Vec::with_capacity(sources.len());
    let mut skipped = 0;
    for (i, (res, (src, reference))) in results
        .iter()
        .zip(sources.iter().zip(references))
        .enumerate()
    {
        let r = as_strings(&reference.words);
        let best = res
            .nbest
            .iter()
            .filter(|t| !t.tokens.is_empty())
            .map(|t| {
                (
                    crate::eval::sentence_bleu_smoothed(&as_strings(&t.tokens), &r),
                    t,
                )
            })
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        match best {
            Some((_, t)) => corpus.push(TrainExample {
                src: src.clone(),
                tgt: SentenceInput::plain(t.tokens.clone()),
                alignment: None,
            }),
            None => {
                skipped += 1;
                eprintln!("distill: sentence {i} produced no non-empty hypothesis, skipped");
            }
        }
    }
    Ok((corpus, skipped))
}

/// Post-editing input: source tokens, the reserved separator control token,
/// then the MT hypothesis, as one sequence. Both sides must be non-empty.
pub fn build_multisource_pair(
    source: &[String],
    mt_hypothesis: &[String],
) -> Result<Vec<String>> {
    if source.is_empty() || mt_hypothesis.is_empty() {
        return Err(Error::Invalid(
            "multi-source pair needs non-empty source and hypothesis".into(),
        ));
    }
    let mut out = Vec::with_capacity(source.len() + 1 + mt_hypothesis.len());
    out.extend(source.iter().cloned());
    out.push(crate::vocab::SEPARATOR.to_string());
    out.extend(mt_hypothesis.iter().cloned());
    Ok(out)
}

/// Continue training an existing model on in-domain data (same loop, fresh
/// schedule). Zero epochs leaves the model bit-identical.
pub fn adapt<S: Scalar>(
    model: &mut NmtModel<S>,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    train(model, examples, cfg)
}

impl SentenceInput {
    pub(crate) fn feat_values(&self, pos: usize, n: usize) -> Vec<usize> {
        if self.feats.is_empty() {
            vec![0; n]
        } else {
            self.feats.iter().map(|f| f[pos]).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, ParamSet};
    use crate::model::FeatureSpec;

    fn tiny_model(seed: u64) -> NmtModel<f64> {
        let mut cfg = ModelConfig::new(8, 8, 4, 4);
        cfg.num_layers = 2;
        cfg.bidirectional = true;
        cfg.tgt_features = vec![FeatureSpec::new("case", 3)];
        NmtModel::new(cfg, seed)
    }

    fn example(src: &[u32], tgt: &[u32], links: &[(usize, usize)]) -> TrainExample {
        TrainExample {
            src: SentenceInput::plain(src.to_vec()),
            tgt: SentenceInput {
                words: tgt.to_vec(),
                feats: vec![vec![1; tgt.len()]],
            },
            alignment: Some(
                AlignmentMatrix::new(src.len(), tgt.len(), links.to_vec()).unwrap(),
            ),
        }
    }

    #[test]
    fn multisource_pair_layout() {
        let s: Vec<String> = vec!["a".into()];
        let h: Vec<String> = vec!["b".into()];
        assert_eq!(
            build_multisource_pair(&s, &h).unwrap(),
            vec!["a".to_string(), "⟦sep⟧".to_string(), "b".to_string()]
        );
        assert!(build_multisource_pair(&[], &h).is_err());
        assert!(build_multisource_pair(&s, &[]).is_err());
    }

    #[test]
    fn distill_selects_reference_when_present_in_nbest() {
        // a peaked random model: whatever its 3-best outputs are, feeding the
        // 1-best back as the "reference" must select exactly that hypothesis
        use crate::decoding::{batch_translate, DecodeOptions};
        use crate::model::InferModel;
        let mut m = NmtModel::<f32>::new(ModelConfig::new(8, 8, 4, 4), 11);
        for (_, t) in m.params.iter_mut() {
            for v in t.data.iter_mut() {
                *v *= 6.0;
            }
        }
        let im = InferModel::dense(&m);
        let sources: Vec<SentenceInput> = (0..5)
            .map(|i| SentenceInput::plain(vec![4 + i % 4, 5 + i % 3]))
            .collect();
        let opts = DecodeOptions {
            beam: 3,
            nbest: 3,
            max_len: 8,
            ..DecodeOptions::default()
        };
        let decoded = batch_translate(&[&im], &sources, 4, &opts).unwrap();
        // pick each sentence's *worst* non-empty hypothesis as the reference
        let refs: Vec<SentenceInput> = decoded
            .iter()
            .map(|r| {
                let worst = r
                    .nbest
                    .iter()
                    .rev()
                    .find(|t| !t.tokens.is_empty())
                    .unwrap_or(&r.best);
                SentenceInput::plain(worst.tokens.clone())
            })
            .collect();
        let (corpus, skipped) = distill_prepare(&im, &sources, &refs, 3, 4, 8).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(corpus.len(), sources.len());
        for (ex, r) in corpus.iter().zip(&refs) {
            assert_eq!(ex.tgt.words, r.words, "reference in n-best must win");
        }
    }

    #[test]
    fn distill_nbest_one_is_plain_teacher_output() {
        use crate::decoding::{batch_translate, DecodeOptions};
        use crate::model::InferModel;
        let m = NmtModel::<f32>::new(ModelConfig::new(8, 8, 4, 4), 13);
        let im = InferModel::dense(&m);
        let sources = vec![SentenceInput::plain(vec![4, 5])];
        let refs = vec![SentenceInput::plain(vec![6])];
        let opts = DecodeOptions {
            beam: 1,
            nbest: 1,
            max_len: 64,
            ..DecodeOptions::default()
        };
        let plain = batch_translate(&[&im], &sources, 1, &opts).unwrap();
        let (corpus, _) = distill_prepare(&im, &sources, &refs, 1, 1, 64).unwrap();
        if corpus.is_empty() {
            // teacher emitted an empty hypothesis; the skip path is the contract
            assert!(plain[0].best.tokens.is_empty());
        } else {
            assert_eq!(corpus[0].tgt.words, plain[0].best.tokens);
        }
    }

    #[test]
    fn guided_loss_examples() {
        // single cell: (1 - 0.5)^2 = 0.25
        let l = guided_alignment_loss(&[1.0], &[0.5], 1, 1).unwrap();
        assert_eq!(l, 0.25);
        // 2x2 identity vs uniform 0.5: each row contributes 0.5, mean 0.5
        let l = guided_alignment_loss(&[1.0, 0.0, 0.0, 1.0], &[0.5; 4], 2, 2).unwrap();
        assert_eq!(l, 0.5);
        // unaligned row excluded from sum and T
        let l = guided_alignment_loss(&[1.0, 0.0, 0.0, 0.0], &[0.5, 0.5, 0.9, 0.1], 2, 2)
            .unwrap();
        assert_eq!(l, 0.5);
        assert!(guided_alignment_loss(&[0.0], &[0.5], 1, 1).is_err());
    }

    #[test]
    fn nll_loss_examples() {
        // uniform over 4: -ln(0.25)
        let rows = vec![vec![0.25; 4], vec![0.25; 4]];
        let l = nll_loss(&rows, &[0, 3], &[true, true]).unwrap();
        assert!((l - (4.0f64).ln()).abs() < 1e-12);
        // masked position ignored
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = nll_loss(&rows, &[0, 0], &[true, false]).unwrap();
        assert!(l.abs() < 1e-9);
        assert!(nll_loss(&rows, &[0], &[true]).is_err());
    }

    /// Gradient of the full model loss (decoder NLL + guided alignment +
    /// feature loss through the whole network) checks against central
    /// differences.
    #[test]
    fn full_loss_gradient_checks() {
        let mut model = tiny_model(3);
        // A freshly initialized model has near-vanishing gradients that
        // drown in finite-difference noise; scale the weights up so the
        // comparison is meaningful.
        for (_, t) in model.params.iter_mut() {
            for v in t.data.iter_mut() {
                *v *= 8.0;
            }
        }
        let batch = vec![
            example(&[4, 5, 6], &[5, 6], &[(0, 0), (2, 1)]),
            example(&[6, 4, 7], &[7, 4, 5], &[(0, 0), (1, 1), (2, 2)]),
        ];
        let params: ParamSet = model.params.clone();
        let cfg = model.config.clone();
        let report = grad_check(
            &params,
            |g, ps| {
                for (name, t) in ps {
                    g.param(name, t.clone());
                }
                build_batch_loss(g, &cfg, &batch, 0.5, 1.0, 0.0)
                    .unwrap()
                    .total
            },
            1e-4,
            4,
        );
        assert!(
            report.max_rel_err() <= 1e-4,
            "max rel err {} per param {:?}",
            report.max_rel_err(),
            report.per_param
        );
    }

    /// Graph forward must agree with the raw inference path when teacher
    /// forcing the same tokens.
    #[test]
    fn graph_forward_matches_inference_path() {
        use crate::model::{decode_step_rows, encode_batch, DecState, InferModel};
        let model = tiny_model(9);
        let cfg = model.config.clone();
        let ex = example(&[4, 5, 6], &[5, 6, 7], &[(0, 0)]);

        // graph probabilities for step 0 (<s> input)
        let mut g: Graph<f64> = Graph::new(1);
        register_params(&mut g, &model.params);
        let loss = build_batch_loss(&mut g, &cfg, &[ex.clone()], 0.0, 1.0, 0.0).unwrap();
        let _ = loss;
        // recompute logits row 0 via inference
        let infer = InferModel::dense(&model);
        let enc = &encode_batch(&infer, &[ex.src.clone()]).unwrap()[0];
        // decoder init in the graph is zero states; mirror that here
        let st = DecState {
            h: vec![vec![0.0; cfg.rnn_size]; cfg.num_layers],
            c: vec![vec![0.0; cfg.rnn_size]; cfg.num_layers],
            input_feed: vec![0.0; cfg.rnn_size],
        };
        let (_, outs) =
            decode_step_rows(&infer, &[st], &[(vocab::BOS, vec![0])], &[enc]).unwrap();
        // graph nll for the first target under these probs should match the
        // inference-path probability of that token
        let p = outs[0].probs[5];
        // extract the same quantity from a 1-token-target graph
        let mut ex1 = ex.clone();
        ex1.tgt.words = vec![5];
        ex1.tgt.feats = vec![vec![1]];
        ex1.alignment = None;
        let mut g1: Graph<f64> = Graph::new(1);
        register_params(&mut g1, &model.params);
        let l1 = build_batch_loss(&mut g1, &cfg, &[ex1], 0.0, 0.0, 0.0).unwrap();
        // two steps (word + </s>); l_dec = -(ln p(5) + ln p(</s>|5))/2,
        // so compare against the single-step term via a second inference step
        let l_dec = g1.value(l1.l_dec).data[0];
        let infer2 = InferModel::dense(&model);
        let (st2, _) = {
            let st = DecState {
                h: vec![vec![0.0; cfg.rnn_size]; cfg.num_layers],
                c: vec![vec![0.0; cfg.rnn_size]; cfg.num_layers],
                input_feed: vec![0.0; cfg.rnn_size],
            };
            decode_step_rows(&infer2, &[st], &[(vocab::BOS, vec![0])], &[enc]).unwrap()
        };
        let (_, outs2) =
            decode_step_rows(&infer2, &[st2[0].clone()], &[(5, vec![1])], &[enc]).unwrap();
        let expect = -(p.ln() + outs2[0].probs[vocab::EOS as usize].ln()) / 2.0;
        assert!(
            (l_dec - expect).abs() < 1e-8,
            "graph {l_dec} vs inference {expect}"
        );
    }

    #[test]
    fn bucketing_is_same_length_and_deterministic() {
        let exs: Vec<TrainExample> = [3usize, 5, 3, 4, 3, 5]
            .iter()
            .map(|&n| TrainExample {
                src: SentenceInput::plain((0..n as u32).map(|i| i + 4).collect()),
                tgt: SentenceInput::plain(vec![4, 5]),
                alignment: None,
            })
            .collect();
        let batches = bucket_batches(&exs, 2);
        for batch in &batches {
            let len = exs[batch[0]].src.words.len();
            assert!(batch.iter().all(|&i| exs[i].src.words.len() == len));
        }
        assert_eq!(batches, bucket_batches(&exs, 2));
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, exs.len());
    }

    fn copy_examples(n: usize, seed: u64) -> Vec<TrainExample> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| {
                let n = 2 + (rng.below(3) as usize);
                let words: Vec<u32> = (0..n).map(|_| 4 + rng.below(6) as u32).collect();
                TrainExample {
                    src: SentenceInput::plain(words.clone()),
                    tgt: SentenceInput::plain(words),
                    alignment: None,
                }
            })
            .collect()
    }

    /// Loss must drop substantially on a toy copy task.
    #[test]
    fn training_reduces_loss() {
        let mut cfg = ModelConfig::new(10, 10, 8, 16);
        cfg.num_layers = 1;
        let examples = copy_examples(200, 7);
        let tc = TrainConfig {
            epochs: 45,
            batch_size: 8,
            lr: 1.0,
            start_decay_epoch: 1000,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut m: NmtModel<f64> = NmtModel::new(cfg, 2);
        let r = train(&mut m, &examples, &tc).unwrap();
        assert!(
            r.last().unwrap().l_dec < 0.4 * r[0].l_dec,
            "first {} last {}",
            r[0].l_dec,
            r.last().unwrap().l_dec
        );
    }

    /// The same seed and corpus give bit-identical parameters.
    #[test]
    fn training_is_bit_reproducible() {
        let mut cfg = ModelConfig::new(10, 10, 8, 8);
        cfg.num_layers = 1;
        let examples = copy_examples(40, 7);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut m1: NmtModel<f64> = NmtModel::new(cfg.clone(), 2);
        let r1 = train(&mut m1, &examples, &tc).unwrap();
        let mut m2: NmtModel<f64> = NmtModel::new(cfg, 2);
        let r2 = train(&mut m2, &examples, &tc).unwrap();
        assert_eq!(r1.last().unwrap().l_dec, r2.last().unwrap().l_dec);
        for (a, b) in m1.params.values().zip(m2.params.values()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn zero_epoch_adapt_is_identity() {
        let mut m = tiny_model(4);
        let before = m.params.clone();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        adapt(&mut m, &[example(&[4], &[4], &[(0, 0)])], &tc).unwrap();
        for (a, b) in before.values().zip(m.params.values()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn lr_and_wga_schedules() {
        let mut cfg = ModelConfig::new(8, 8, 4, 4);
        cfg.num_layers = 1;
        let mut m: NmtModel<f64> = NmtModel::new(cfg, 1);
        let exs = vec![example(&[4, 5], &[4, 5], &[(0, 0), (1, 1)])];
        let tc = TrainConfig {
            epochs: 4,
            lr: 1.0,
            lr_decay: 0.7,
            start_decay_epoch: 3,
            w_ga: 0.5,
            w_ga_decay: 0.9,
            seed: 1,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &exs, &tc).unwrap();
        assert_eq!(r[0].lr, 1.0);
        assert_eq!(r[1].lr, 1.0);
        assert!((r[2].lr - 0.7).abs() < 1e-12);
        assert!((r[3].lr - 0.49).abs() < 1e-12);
        assert!((r[0].w_ga - 0.5).abs() < 1e-12);
        assert!((r[1].w_ga - 0.45).abs() < 1e-12);
        assert!(r[0].l_ga > 0.0);
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let mut cfg = ModelConfig::new(8, 8, 4, 4);
        cfg.num_layers = 1;
        let m: NmtModel<f64> = NmtModel::new(cfg.clone(), 1);
        let mut clipped = m.clone();
        let ex = example(&[4, 5, 6], &[7, 6, 5], &[(0, 0)]);
        let mut g: Graph<f64> = Graph::new(1);
        register_params(&mut g, &m.params);
        let loss = build_batch_loss(&mut g, &cfg, &[ex], 0.0, 1.0, 0.0).unwrap();
        g.backward(loss.total).unwrap();
        sgd_step(&mut clipped, &g, 1.0, 1e-6);
        let mut sq = 0.0;
        for (name, t) in &clipped.params {
            for (a, b) in t.data.iter().zip(&m.params[name].data) {
                sq += (a - b) * (a - b);
            }
        }
        // update norm == lr * min(clip, norm); with clip tiny it is ~clip
        assert!(sq.sqrt() <= 1.1e-6);
    }
}
