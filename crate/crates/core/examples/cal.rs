//! Scratch calibration harness (not part of the library).
use std::time::Instant;

use snmt_core::align::AlignmentMatrix;
use snmt_core::compress::{magnitude_prune, retrain_pruned, PruneScope};
use snmt_core::decoding::{batch_translate, beam_search, DecodeOptions};
use snmt_core::model::{InferModel, ModelConfig, NmtModel, SentenceInput};
use snmt_core::training::{train, TrainConfig, TrainExample};
use snmt_core::SplitMix64;

fn copy_corpus(seed: u64, n: usize, nw: usize, min_len: usize, max_len: usize) -> Vec<TrainExample> {
    let mut rng = SplitMix64::new(seed);
    let span = (max_len - min_len + 1) as u64;
    (0..n)
        .map(|_| {
            let len = min_len + (rng.next_u64() % span) as usize;
            let words: Vec<u32> = (0..len).map(|_| 4 + (rng.next_u64() % nw as u64) as u32).collect();
            TrainExample { src: SentenceInput::plain(words.clone()), tgt: SentenceInput::plain(words), alignment: None }
        })
        .collect()
}

fn reverse_corpus(seed: u64, n: usize, nw: usize, min_len: usize, max_len: usize, aligned: bool) -> Vec<TrainExample> {
    let mut rng = SplitMix64::new(seed);
    let span = (max_len - min_len + 1) as u64;
    (0..n)
        .map(|_| {
            let len = min_len + (rng.next_u64() % span) as usize;
            let words: Vec<u32> = (0..len).map(|_| 4 + (rng.next_u64() % nw as u64) as u32).collect();
            let rev: Vec<u32> = words.iter().rev().cloned().collect();
            let alignment = aligned.then(|| {
                AlignmentMatrix::new(len, len, (0..len).map(|i| (i, len - 1 - i)).collect()).unwrap()
            });
            TrainExample { src: SentenceInput::plain(words), tgt: SentenceInput::plain(rev), alignment }
        })
        .collect()
}

fn acc(infer: &InferModel<f32>, examples: &[TrainExample]) -> f64 {
    let inputs: Vec<SentenceInput> = examples.iter().map(|e| e.src.clone()).collect();
    let opts = DecodeOptions { beam: 1, max_len: 32, ..DecodeOptions::default() };
    let results = batch_translate(&[infer], &inputs, 16, &opts).unwrap();
    results.iter().zip(examples).filter(|(r, e)| r.best.tokens == e.tgt.words).count() as f64 / examples.len() as f64
}

fn base_tc(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, lr: 1.0, lr_decay: 0.7, start_decay_epoch: 999, clip_norm: 5.0, w_ga: 0.0, w_ga_decay: 0.9, lambda_feat: 1.0, seed, log: false }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args[0].as_str() {
        "c3" => c3(),
        "c5" => c5(args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10)),
        "c7" => c7(),
        _ => eprintln!("unknown"),
    }
}

fn c3() {
    let dim: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(64);
    let mut cfg = ModelConfig::new(30, 30, dim, dim);
    cfg.num_layers = 2;
    let mut m = NmtModel::<f32>::new(cfg, 17);
    for (_, t) in m.params.iter_mut() {
        for v in t.data.iter_mut() { *v *= 6.0; }
    }
    let im = InferModel::dense(&m);
    let mut rng = SplitMix64::new(99);
    let sentences: Vec<SentenceInput> = (0..50)
        .map(|_| {
            let len = 3 + (rng.next_u64() % 8) as usize;
            SentenceInput::plain((0..len).map(|_| 4 + (rng.next_u64() % 26) as u32).collect())
        })
        .collect();
    for k in [1usize, 2, 5] {
        let opts = DecodeOptions { beam: k, max_len: 16, ..DecodeOptions::default() };
        let sequential: Vec<Vec<u32>> = sentences.iter().map(|s| beam_search(&[&im], s, &opts).unwrap().best.tokens).collect();
        for b in [1usize, 4, 16] {
            let batched = batch_translate(&[&im], &sentences, b, &opts).unwrap();
            let bad = batched.iter().enumerate().filter(|(i, r)| r.best.tokens != sequential[*i]).count();
            println!("K={k} B={b}: {bad} mismatches");
            if bad > 0 {
                for (i, r) in batched.iter().enumerate() {
                    if r.best.tokens != sequential[i] {
                        println!("  sent {i}: seq {:?} vs batch {:?}", sequential[i], r.best.tokens);
                        break;
                    }
                }
            }
        }
    }
    for k in [1usize, 5] {
    let opts = DecodeOptions { beam: k, max_len: 16, ..DecodeOptions::default() };
    for b in [1usize, 4, 16] {
        let mut best = f64::MAX;
        for _ in 0..5 {
            let t0 = Instant::now();
            let out = batch_translate(&[&im], &sentences, b, &opts).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            let toks: usize = out.iter().map(|r| r.best.tokens.len()).sum();
            best = best.min(secs / toks.max(1) as f64);
        }
        println!("K={k} B={b}: {:.0} tok/s", 1.0 / best);
    }
    }
}

fn c5(seeds: u64) {
    let max_epochs = 24usize;
    let dim: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(64);
    let bidi: bool = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(false);
    let task = std::env::args().nth(5).unwrap_or_else(|| "reverse".into());
    let nw: usize = std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(12);
    let lmin: usize = std::env::args().nth(7).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lmax: usize = std::env::args().nth(8).map(|s| s.parse().unwrap()).unwrap_or(7);
    for seed in 0..seeds {
        let corpus = if task == "copy" {
            let mut c = copy_corpus(21 + seed, 400, nw, lmin, lmax);
            for e in c.iter_mut() {
                let n = e.src.words.len();
                e.alignment = Some(AlignmentMatrix::new(n, n, (0..n).map(|i| (i, i)).collect()).unwrap());
            }
            c
        } else {
            reverse_corpus(21 + seed, 400, 12, 3, 7, true)
        };
        let run = |w_ga: f64| -> (usize, f64) {
            let mut cfg = ModelConfig::new(16, 16, dim, dim);
            cfg.num_layers = 1;
            cfg.bidirectional = bidi;
            let mut model = NmtModel::<f32>::new(cfg, seed + 1);
            let mut last = f64::MAX;
            for epoch in 1..=max_epochs {
                let mut tc = base_tc(1, seed * 100 + epoch as u64);
                tc.clip_norm = std::env::args().nth(9).map(|s| s.parse().unwrap()).unwrap_or(5.0);
                tc.w_ga = w_ga * 0.9f64.powi(epoch as i32 - 1);
                let reps = train(&mut model, &corpus, &tc).unwrap();
                last = reps.last().unwrap().l_ga;
                if acc(&InferModel::dense(&model), &corpus[..100]) >= 0.95 {
                    return (epoch, last);
                }
            }
            (max_epochs + 1, last)
        };
        let (b, _) = run(0.0);
        let (g, lga) = run(0.5);
        println!("seed {seed}: base {b} guided {g} lga {lga:.4}");
    }
}

fn c7() {
    for (epochs, decay) in [(12usize, 10usize), (14, 11), (10, 999)] {
        let corpus = copy_corpus(11, 1000, 16, 3, 8);
        let heldout = copy_corpus(999, 300, 16, 3, 8);
        let mut cfg = ModelConfig::new(20, 20, 64, 64);
        cfg.num_layers = 1;
        cfg.bidirectional = true;
        let mut model = NmtModel::<f32>::new(cfg, 5);
        let mut tc = base_tc(epochs, 5);
        tc.start_decay_epoch = decay;
        train(&mut model, &corpus, &tc).unwrap();
        let train_acc = acc(&InferModel::dense(&model), &corpus[..300]);
        let held_acc = acc(&InferModel::dense(&model), &heldout);
        let mut pruned = model.clone();
        magnitude_prune(&mut pruned, 0.6, PruneScope::ClassBlind).unwrap();
        let p_train = acc(&InferModel::dense(&pruned), &corpus[..300]);
        let p_held = acc(&InferModel::dense(&pruned), &heldout);
        let mut rtc = base_tc(4, 9);
        rtc.lr = 0.5;
        retrain_pruned(&mut pruned, &corpus, &rtc).unwrap();
        let r_held = acc(&InferModel::dense(&pruned), &heldout);
        let r_train = acc(&InferModel::dense(&pruned), &corpus[..300]);
        println!(
            "epochs {epochs} decay {decay}: train {train_acc:.3} held {held_acc:.3} | pruned train {p_train:.3} held {p_held:.3} | retrained train {r_train:.3} held {r_held:.3}"
        );
    }
}
