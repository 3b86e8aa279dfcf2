//! The attentional encoder-decoder model: configuration, named parameter
//! registry, and a raw (graph-free) inference path used by the decoder.
//!
//! Parameter layout per LSTM layer: the gate pre-activation is
//! `x·W + h·U + b` with the 4h columns ordered [input, forget, cell, output].
//! Word features are appended to the embedding as one-hot vectors scaled by
//! 1/n_f. The first decoder layer additionally receives the previous step's
//! attentional output (input feeding).

use indexmap::IndexMap;

use crate::ccs::SparseCcs;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::vocab;

pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub n_values: usize,
}

impl FeatureSpec {
    pub fn new(name: &str, n_values: usize) -> FeatureSpec {
        FeatureSpec {
            name: name.to_string(),
            n_values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_size: usize,
    pub rnn_size: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
    pub dropout: f64,
    pub max_len: usize,
    pub src_features: Vec<FeatureSpec>,
    pub tgt_features: Vec<FeatureSpec>,
}

impl ModelConfig {
    /// A small default; real runs override fields.
    pub fn new(src_vocab: usize, tgt_vocab: usize, embed_size: usize, rnn_size: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            embed_size,
            rnn_size,
            num_layers: 1,
            bidirectional: false,
            dropout: 0.0,
            max_len: 256,
            src_features: Vec::new(),
            tgt_features: Vec::new(),
        }
    }

    pub fn src_feat_width(&self) -> usize {
        self.src_features.iter().map(|f| f.n_values).sum()
    }

    pub fn tgt_feat_width(&self) -> usize {
        self.tgt_features.iter().map(|f| f.n_values).sum()
    }

    pub fn enc_input_size(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_size + self.src_feat_width()
        } else {
            self.rnn_size
        }
    }

    pub fn dec_input_size(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_size + self.tgt_feat_width() + self.rnn_size
        } else {
            self.rnn_size
        }
    }
}

/// Deterministic parameter name order; serialization and initialization both
/// follow it.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.rnn_size;
    let mut out = vec![
        ("src_embed".to_string(), vec![cfg.src_vocab, cfg.embed_size]),
        ("tgt_embed".to_string(), vec![cfg.tgt_vocab, cfg.embed_size]),
    ];
    let mut lstm = |prefix: &str, in_dim: usize| {
        out.push((format!("{prefix}.w"), vec![in_dim, 4 * h]));
        out.push((format!("{prefix}.u"), vec![h, 4 * h]));
        out.push((format!("{prefix}.b"), vec![1, 4 * h]));
    };
    for l in 0..cfg.num_layers {
        lstm(&format!("enc.l{l}"), cfg.enc_input_size(l));
    }
    if cfg.bidirectional {
        for l in 0..cfg.num_layers {
            lstm(&format!("enc_rev.l{l}"), cfg.enc_input_size(l));
        }
    }
    for l in 0..cfg.num_layers {
        lstm(&format!("dec.l{l}"), cfg.dec_input_size(l));
    }
    out.push(("attn.w".to_string(), vec![h, h]));
    out.push(("attn.comb".to_string(), vec![2 * h, h]));
    out.push(("gen.w".to_string(), vec![h, cfg.tgt_vocab]));
    out.push(("gen.b".to_string(), vec![1, cfg.tgt_vocab]));
    for f in &cfg.tgt_features {
        out.push((format!("feat.{}.w", f.name), vec![h, f.n_values]));
        out.push((format!("feat.{}.b", f.name), vec![1, f.n_values]));
    }
    out
}

/// Bias parameters are exempt from pruning.
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name == "gen.b"
}

#[derive(Debug, Clone)]
pub struct NmtModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<S>>,
    /// Prune masks (true = weight kept). Empty map when unpruned.
    pub masks: IndexMap<String, Vec<bool>>,
    /// Embedding rows excluded from updates (external embeddings).
    pub frozen_rows: IndexMap<String, Vec<bool>>,
}

impl<S: Scalar> NmtModel<S> {
    /// All parameters drawn uniformly from [-0.1, 0.1] using one seed.
    pub fn new(config: ModelConfig, seed: u64) -> NmtModel<S> {
        let mut rng = SplitMix64::new(seed);
        let mut params = IndexMap::new();
        for (name, dims) in param_shapes(&config) {
            let n: usize = dims.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| S::from_f64(rng.uniform(-INIT_RANGE, INIT_RANGE)))
                .collect();
            params.insert(name, Tensor::new(dims, data).unwrap());
        }
        NmtModel {
            config,
            params,
            masks: IndexMap::new(),
            frozen_rows: IndexMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> &Tensor<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Embedding row with the scaled feature one-hots appended (each feature
    /// contributes an n_f-wide block containing 1/n_f at the chosen index).
    pub fn embed_with_features(
        &self,
        embed_name: &str,
        specs: &[FeatureSpec],
        word: u32,
        feats: &[usize],
    ) -> Result<Vec<S>> {
        let embed = self.param(embed_name);
        if (word as usize) >= embed.rows() {
            return Err(Error::Invalid(format!(
                "word id {word} out of range for {embed_name} ({} rows)",
                embed.rows()
            )));
        }
        if feats.len() != specs.len() {
            return Err(Error::Invalid(format!(
                "expected {} feature values, got {}",
                specs.len(),
                feats.len()
            )));
        }
        let mut v: Vec<S> = embed.row(word as usize).to_vec();
        for (spec, &idx) in specs.iter().zip(feats) {
            if idx >= spec.n_values {
                return Err(Error::Invalid(format!(
                    "feature {} value {idx} out of range ({} values)",
                    spec.name, spec.n_values
                )));
            }
            let base = v.len();
            v.extend(std::iter::repeat(S::zero()).take(spec.n_values));
            v[base + idx] = S::from_f64(1.0 / spec.n_values as f64);
        }
        Ok(v)
    }

    pub fn cast<T: Scalar>(&self) -> NmtModel<T> {
        NmtModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            masks: self.masks.clone(),
            frozen_rows: self.frozen_rows.clone(),
        }
    }

    /// Overwrite embedding rows from pretrained vectors and freeze them.
    /// `rows` maps vocab id -> vector (must match embed_size).
    pub fn load_external_embeddings(
        &mut self,
        embed_name: &str,
        rows: &[(u32, Vec<S>)],
    ) -> Result<()> {
        let d = self.config.embed_size;
        let embed = self
            .params
            .get_mut(embed_name)
            .ok_or_else(|| Error::Invalid(format!("no embedding {embed_name}")))?;
        let n_rows = embed.rows();
        let mut frozen = self
            .frozen_rows
            .get(embed_name)
            .cloned()
            .unwrap_or_else(|| vec![false; n_rows]);
        for (id, vec) in rows {
            let id = *id as usize;
            if id >= n_rows {
                return Err(Error::Invalid(format!("embedding row {id} out of range")));
            }
            if vec.len() != d {
                return Err(Error::Invalid(format!(
                    "embedding vector length {} != embed size {d}",
                    vec.len()
                )));
            }
            embed.data[id * d..(id + 1) * d].copy_from_slice(vec);
            frozen[id] = true;
        }
        self.frozen_rows.insert(embed_name.to_string(), frozen);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Raw inference path (no autodiff graph). Weight matrices may be dense or
// compressed sparse column, so the pruned model decodes through the same code.
// ---------------------------------------------------------------------------

enum Mat<S: Scalar> {
    Dense(Tensor<S>),
    Sparse(SparseCcs<S>),
}

impl<S: Scalar> Mat<S> {
    /// x (r, k) · M (k, c) -> (r, c)
    fn left_mul(&self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            Mat::Dense(w) => {
                let (r, k, c) = (x.rows(), x.cols(), w.cols());
                assert_eq!(k, w.rows(), "inference matmul shape mismatch");
                let mut out = vec![S::zero(); r * c];
                // Row tiles keep each weight row hot across several input
                // rows, so the weight matrix is streamed once per tile
                // instead of once per row; larger row counts (bigger decode
                // batches) touch memory proportionally less. Accumulation
                // order over p is unchanged, so results are bit-identical
                // for any tiling.
                const TILE: usize = 8;
                let mut i0 = 0;
                while i0 < r {
                    let i1 = (i0 + TILE).min(r);
                    for p in 0..k {
                        let wrow = &w.data[p * c..(p + 1) * c];
                        for i in i0..i1 {
                            let a = x.data[i * k + p];
                            if a != S::zero() {
                                let orow = &mut out[i * c..(i + 1) * c];
                                for j in 0..c {
                                    orow[j] = orow[j] + a * wrow[j];
                                }
                            }
                        }
                    }
                    i0 = i1;
                }
                Tensor::new(vec![r, c], out).unwrap()
            }
            Mat::Sparse(m) => m.left_matmul(x).unwrap(),
        }
    }
}

/// Inference view of a model: 2-d weights indexed by name (dense or sparse),
/// plus a borrowed model for embeddings/biases/config.
pub struct InferModel<'a, S: Scalar> {
    pub model: &'a NmtModel<S>,
    mats: IndexMap<String, Mat<S>>,
}

impl<'a, S: Scalar> InferModel<'a, S> {
    pub fn dense(model: &'a NmtModel<S>) -> InferModel<'a, S> {
        let mats = model
            .params
            .iter()
            .filter(|(name, _)| !is_bias(name) && !name.ends_with("_embed"))
            .map(|(name, t)| (name.clone(), Mat::Dense(t.clone())))
            .collect();
        InferModel { model, mats }
    }

    /// Convert every non-bias, non-embedding weight to compressed sparse
    /// column storage.
    pub fn sparse(model: &'a NmtModel<S>) -> InferModel<'a, S> {
        let mats = model
            .params
            .iter()
            .filter(|(name, _)| !is_bias(name) && !name.ends_with("_embed"))
            .map(|(name, t)| (name.clone(), Mat::Sparse(SparseCcs::from_dense(t))))
            .collect();
        InferModel { model, mats }
    }

    fn mat(&self, name: &str) -> &Mat<S> {
        self.mats
            .get(name)
            .unwrap_or_else(|| panic!("missing weight {name}"))
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    /// One LSTM step for all rows. `x` is (R, in), `h`/`c` are (R, h).
    fn lstm_step(
        &self,
        prefix: &str,
        x: &Tensor<S>,
        h: &Tensor<S>,
        c: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>) {
        let hsz = self.cfg().rnn_size;
        let mut pre = self.mat(&format!("{prefix}.w")).left_mul(x);
        let rec = self.mat(&format!("{prefix}.u")).left_mul(h);
        let bias = self.model.param(&format!("{prefix}.b"));
        let r = x.rows();
        for i in 0..r {
            for j in 0..4 * hsz {
                pre.data[i * 4 * hsz + j] =
                    pre.data[i * 4 * hsz + j] + rec.data[i * 4 * hsz + j] + bias.data[j];
            }
        }
        let mut nh = vec![S::zero(); r * hsz];
        let mut nc = vec![S::zero(); r * hsz];
        let one = S::one();
        for i in 0..r {
            for j in 0..hsz {
                let base = i * 4 * hsz;
                let ig = one / (one + (-pre.data[base + j]).exp());
                let fg = one / (one + (-pre.data[base + hsz + j]).exp());
                let gg = pre.data[base + 2 * hsz + j].tanh();
                let og = one / (one + (-pre.data[base + 3 * hsz + j]).exp());
                let cv = fg * c.data[i * hsz + j] + ig * gg;
                nc[i * hsz + j] = cv;
                nh[i * hsz + j] = og * cv.tanh();
            }
        }
        (
            Tensor::new(vec![r, hsz], nh).unwrap(),
            Tensor::new(vec![r, hsz], nc).unwrap(),
        )
    }
}

/// Encoder output for one sentence: per-position states (len × h, row-major)
/// and the final (h, c) per layer used to initialize the decoder.
#[derive(Debug, Clone)]
pub struct EncOut<S: Scalar> {
    pub states: Tensor<S>,
    pub final_h: Vec<Vec<S>>,
    pub final_c: Vec<Vec<S>>,
}

/// Token ids plus one value per source feature per position.
#[derive(Debug, Clone, Default)]
pub struct SentenceInput {
    pub words: Vec<u32>,
    pub feats: Vec<Vec<usize>>,
}

impl SentenceInput {
    pub fn plain(words: Vec<u32>) -> SentenceInput {
        SentenceInput {
            words,
            feats: Vec::new(),
        }
    }

    pub fn feat_row(&self, pos: usize, n: usize) -> Vec<usize> {
        if self.feats.is_empty() {
            vec![0; n]
        } else {
            self.feats.iter().map(|f| f[pos]).collect()
        }
    }
}

/// Encode a batch of sentences. Shorter sentences are right-padded
/// internally; the backward pass resets its state at each sentence's true
/// end and only real positions are returned, so results are identical to
/// encoding each sentence alone.
pub fn encode_batch<S: Scalar>(
    infer: &InferModel<S>,
    sentences: &[SentenceInput],
) -> Result<Vec<EncOut<S>>> {
    let cfg = infer.cfg().clone();
    if sentences.is_empty() {
        return Ok(Vec::new());
    }
    for s in sentences {
        if s.words.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sentence".into()));
        }
        if s.words.len() > cfg.max_len {
            return Err(Error::Invalid(format!(
                "source length {} exceeds maximum {}",
                s.words.len(),
                cfg.max_len
            )));
        }
    }
    let b = sentences.len();
    let h = cfg.rnn_size;
    let max_len = sentences.iter().map(|s| s.words.len()).max().unwrap();
    let lens: Vec<usize> = sentences.iter().map(|s| s.words.len()).collect();

    // Input rows per step: (b, embed + feat). Pad positions use <pad>.
    let in0 = cfg.enc_input_size(0);
    let nf = cfg.src_features.len();
    let mut step_inputs: Vec<Tensor<S>> = Vec::with_capacity(max_len);
    for s in 0..max_len {
        let mut data = Vec::with_capacity(b * in0);
        for sent in sentences {
            if s < sent.words.len() {
                data.extend(infer.model.embed_with_features(
                    "src_embed",
                    &cfg.src_features,
                    sent.words[s],
                    &sent.feat_row(s, nf),
                )?);
            } else {
                data.extend(infer.model.embed_with_features(
                    "src_embed",
                    &cfg.src_features,
                    vocab::PAD,
                    &vec![0; nf],
                )?);
            }
        }
        step_inputs.push(Tensor::new(vec![b, in0], data)?);
    }

    let zero_state = || Tensor::<S>::zeros(vec![b, h]);
    // One LSTM layer over the step inputs in one direction; returns the
    // per-position outputs plus the final (h, c) at each sentence's true end.
    let run_layer = |name: &str,
                     layer_in: &[Tensor<S>],
                     forward: bool|
     -> (Vec<Tensor<S>>, Tensor<S>, Tensor<S>) {
        let mut hcur = zero_state();
        let mut ccur = zero_state();
        let mut fh = zero_state();
        let mut fc = zero_state();
        let mut outs: Vec<Tensor<S>> = vec![Tensor::zeros(vec![b, h]); max_len];
        let order: Vec<usize> = if forward {
            (0..max_len).collect()
        } else {
            (0..max_len).rev().collect()
        };
        for &s in &order {
            let (nh, nc) = infer.lstm_step(name, &layer_in[s], &hcur, &ccur);
            hcur = nh;
            ccur = nc;
            if forward {
                for (i, &len) in lens.iter().enumerate() {
                    if s + 1 == len {
                        fh.data[i * h..(i + 1) * h]
                            .copy_from_slice(&hcur.data[i * h..(i + 1) * h]);
                        fc.data[i * h..(i + 1) * h]
                            .copy_from_slice(&ccur.data[i * h..(i + 1) * h]);
                    }
                }
            } else {
                // Reset rows still inside padding so the real suffix
                // starts from a zero state, exactly as if unpadded.
                for (i, &len) in lens.iter().enumerate() {
                    if s >= len {
                        for j in 0..h {
                            hcur.data[i * h + j] = S::zero();
                            ccur.data[i * h + j] = S::zero();
                        }
                    }
                }
            }
            outs[s] = hcur.clone();
        }
        if !forward {
            fh = hcur.clone();
            fc = ccur.clone();
        }
        (outs, fh, fc)
    };

    let sum_t = |a: &Tensor<S>, bt: &Tensor<S>| {
        let data = a
            .data
            .iter()
            .zip(&bt.data)
            .map(|(&x, &y)| x + y)
            .collect();
        Tensor::new(a.dims.clone(), data).unwrap()
    };

    // Each layer is bidirectional on its own: forward and backward outputs
    // are summed per position and the sum feeds the next layer.
    let mut layer_in: Vec<Tensor<S>> = step_inputs;
    let mut fin_h: Vec<Tensor<S>> = Vec::with_capacity(cfg.num_layers);
    let mut fin_c: Vec<Tensor<S>> = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let (fwd_out, fwd_fh, fwd_fc) = run_layer(&format!("enc.l{l}"), &layer_in, true);
        if cfg.bidirectional {
            let (bwd_out, bwd_fh, bwd_fc) =
                run_layer(&format!("enc_rev.l{l}"), &layer_in, false);
            layer_in = fwd_out
                .iter()
                .zip(&bwd_out)
                .map(|(f, bk)| sum_t(f, bk))
                .collect();
            fin_h.push(sum_t(&fwd_fh, &bwd_fh));
            fin_c.push(sum_t(&fwd_fc, &bwd_fc));
        } else {
            layer_in = fwd_out;
            fin_h.push(fwd_fh);
            fin_c.push(fwd_fc);
        }
    }
    let top_out = layer_in;

    let mut result = Vec::with_capacity(b);
    for (i, &len) in lens.iter().enumerate() {
        let mut states = Vec::with_capacity(len * h);
        for out in top_out.iter().take(len) {
            states.extend_from_slice(&out.data[i * h..(i + 1) * h]);
        }
        result.push(EncOut {
            states: Tensor::new(vec![len, h], states)?,
            final_h: fin_h
                .iter()
                .map(|t| t.data[i * h..(i + 1) * h].to_vec())
                .collect(),
            final_c: fin_c
                .iter()
                .map(|t| t.data[i * h..(i + 1) * h].to_vec())
                .collect(),
        });
    }
    Ok(result)
}

/// Per-hypothesis decoder state: (h, c) per layer plus the input-feed vector.
#[derive(Debug, Clone)]
pub struct DecState<S: Scalar> {
    pub h: Vec<Vec<S>>,
    pub c: Vec<Vec<S>>,
    pub input_feed: Vec<S>,
}

impl<S: Scalar> DecState<S> {
    /// Fresh decoder state: zero (h, c) per layer and zero input feed.
    /// The decoder learns to read the source entirely through attention,
    /// and training builds its graph from the same zero state.
    pub fn init(cfg: &ModelConfig, _enc: &EncOut<S>) -> DecState<S> {
        DecState {
            h: vec![vec![S::zero(); cfg.rnn_size]; cfg.num_layers],
            c: vec![vec![S::zero(); cfg.rnn_size]; cfg.num_layers],
            input_feed: vec![S::zero(); cfg.rnn_size],
        }
    }
}

/// One decode step's output for one row.
#[derive(Debug, Clone)]
pub struct StepOut<S: Scalar> {
    /// Full softmax distribution over the target vocabulary.
    pub probs: Vec<S>,
    /// Attention weights over the row's source positions.
    pub attn: Vec<S>,
    /// One softmax distribution per target feature.
    pub feat_probs: Vec<Vec<S>>,
}

fn softmax_slice<S: Scalar>(x: &mut [S]) {
    let mut m = x[0];
    for &v in x.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Advance a set of decoder rows one step. Each row carries its own state,
/// input token (with feature values), and a reference to its sentence's
/// encoder output; rows are independent, so any batching of rows produces
/// identical numbers.
pub fn decode_step_rows<S: Scalar>(
    infer: &InferModel<S>,
    states: &[DecState<S>],
    inputs: &[(u32, Vec<usize>)],
    encs: &[&EncOut<S>],
) -> Result<(Vec<DecState<S>>, Vec<StepOut<S>>)> {
    let cfg = infer.cfg();
    let r = states.len();
    assert_eq!(inputs.len(), r);
    assert_eq!(encs.len(), r);
    if r == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let h = cfg.rnn_size;
    let in0 = cfg.dec_input_size(0);

    // Input rows: embedding + features + input feed.
    let mut xdata = Vec::with_capacity(r * in0);
    for (st, (word, feats)) in states.iter().zip(inputs) {
        xdata.extend(infer.model.embed_with_features(
            "tgt_embed",
            &cfg.tgt_features,
            *word,
            feats,
        )?);
        xdata.extend_from_slice(&st.input_feed);
    }
    let mut x = Tensor::new(vec![r, in0], xdata)?;

    let gather = |get: &dyn Fn(&DecState<S>) -> &[S]| {
        let mut d = Vec::with_capacity(r * h);
        for st in states {
            d.extend_from_slice(get(st));
        }
        Tensor::new(vec![r, h], d).unwrap()
    };

    let mut new_h: Vec<Tensor<S>> = Vec::with_capacity(cfg.num_layers);
    let mut new_c: Vec<Tensor<S>> = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let hprev = gather(&|st| st.h[l].as_slice());
        let cprev = gather(&|st| st.c[l].as_slice());
        let (nh, nc) = infer.lstm_step(&format!("dec.l{l}"), &x, &hprev, &cprev);
        x = nh.clone();
        new_h.push(nh);
        new_c.push(nc);
    }
    let top = &new_h[cfg.num_layers - 1]; // (r, h)

    // Global attention: score(t, s) = h_t · (W_a · h_s); here q = h_t · W_a
    // then dot with each source state.
    let q = infer.mat("attn.w").left_mul(top);
    let mut contexts = Vec::with_capacity(r * h);
    let mut attns: Vec<Vec<S>> = Vec::with_capacity(r);
    for i in 0..r {
        let enc = encs[i];
        let slen = enc.states.rows();
        let qi = &q.data[i * h..(i + 1) * h];
        let mut scores = vec![S::zero(); slen];
        for (s, sc) in scores.iter_mut().enumerate() {
            let es = enc.states.row(s);
            let mut dot = S::zero();
            for j in 0..h {
                dot = dot + qi[j] * es[j];
            }
            *sc = dot;
        }
        softmax_slice(&mut scores);
        let mut ctx = vec![S::zero(); h];
        for (s, &w) in scores.iter().enumerate() {
            let es = enc.states.row(s);
            for j in 0..h {
                ctx[j] = ctx[j] + w * es[j];
            }
        }
        contexts.extend_from_slice(&ctx);
        attns.push(scores);
    }

    // hhat = tanh(W_c [ctx; h_top]) -> input feed + generator input
    let mut cat = Vec::with_capacity(r * 2 * h);
    for i in 0..r {
        cat.extend_from_slice(&contexts[i * h..(i + 1) * h]);
        cat.extend_from_slice(&top.data[i * h..(i + 1) * h]);
    }
    let cat = Tensor::new(vec![r, 2 * h], cat)?;
    let mut hhat = infer.mat("attn.comb").left_mul(&cat);
    for v in hhat.data.iter_mut() {
        *v = v.tanh();
    }

    let vsize = cfg.tgt_vocab;
    let mut logits = infer.mat("gen.w").left_mul(&hhat);
    let gb = infer.model.param("gen.b");
    for i in 0..r {
        for j in 0..vsize {
            logits.data[i * vsize + j] = logits.data[i * vsize + j] + gb.data[j];
        }
    }

    let mut feat_logits: Vec<Tensor<S>> = Vec::new();
    for f in &cfg.tgt_features {
        let mut fl = infer.mat(&format!("feat.{}.w", f.name)).left_mul(&hhat);
        let fb = infer.model.param(&format!("feat.{}.b", f.name));
        for i in 0..r {
            for j in 0..f.n_values {
                fl.data[i * f.n_values + j] = fl.data[i * f.n_values + j] + fb.data[j];
            }
        }
        feat_logits.push(fl);
    }

    let mut new_states = Vec::with_capacity(r);
    let mut outs = Vec::with_capacity(r);
    for i in 0..r {
        let mut probs = logits.data[i * vsize..(i + 1) * vsize].to_vec();
        softmax_slice(&mut probs);
        let mut feat_probs = Vec::with_capacity(cfg.tgt_features.len());
        for (fi, f) in cfg.tgt_features.iter().enumerate() {
            let mut fp = feat_logits[fi].data[i * f.n_values..(i + 1) * f.n_values].to_vec();
            softmax_slice(&mut fp);
            feat_probs.push(fp);
        }
        new_states.push(DecState {
            h: new_h.iter().map(|t| t.data[i * h..(i + 1) * h].to_vec()).collect(),
            c: new_c.iter().map(|t| t.data[i * h..(i + 1) * h].to_vec()).collect(),
            input_feed: hhat.data[i * h..(i + 1) * h].to_vec(),
        });
        outs.push(StepOut {
            probs,
            attn: attns[i].clone(),
            feat_probs,
        });
    }
    Ok((new_states, outs))
}
