//! Model compression: magnitude pruning (class-blind global threshold by
//! default, class-uniform per-tensor behind a flag), retraining with frozen
//! zeros, and reporting for the sparse inference path.

use crate::error::{Error, Result};
use crate::model::{is_bias, NmtModel};
use crate::tensor::Scalar;
use crate::training::{train, EpochReport, TrainConfig, TrainExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneScope {
    /// One global magnitude threshold over every prunable weight.
    #[default]
    ClassBlind,
    /// The same fraction pruned independently within each tensor.
    ClassUniform,
}

fn prunable(name: &str) -> bool {
    !is_bias(name)
}

/// Zero the `fraction` smallest-magnitude weights (biases exempt) and record
/// the kept positions in the model's masks. Ties are broken by parameter
/// order then flat index, so already-zero positions are re-selected first and
/// pruning is idempotent at a fixed fraction. `fraction` must be in [0, 1).
pub fn magnitude_prune<S: Scalar>(
    model: &mut NmtModel<S>,
    fraction: f64,
    scope: PruneScope,
) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Invalid(format!(
            "prune fraction {fraction} outside [0, 1)"
        )));
    }
    let names: Vec<String> = model
        .params
        .keys()
        .filter(|n| prunable(n))
        .cloned()
        .collect();
    match scope {
        PruneScope::ClassBlind => {
            let mut entries: Vec<(f64, usize, usize)> = Vec::new();
            for (ni, name) in names.iter().enumerate() {
                for (i, v) in model.params[name].data.iter().enumerate() {
                    entries.push((v.as_f64().abs(), ni, i));
                }
            }
            let k = (fraction * entries.len() as f64).floor() as usize;
            entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut masks: Vec<Vec<bool>> = names
                .iter()
                .map(|n| vec![true; model.params[n].data.len()])
                .collect();
            for &(_, ni, i) in entries.iter().take(k) {
                masks[ni][i] = false;
            }
            for (name, mask) in names.iter().zip(masks) {
                apply_mask(model, name, mask);
            }
        }
        PruneScope::ClassUniform => {
            for name in &names {
                let data = &model.params[name].data;
                let mut idx: Vec<usize> = (0..data.len()).collect();
                idx.sort_by(|&a, &b| {
                    data[a]
                        .as_f64()
                        .abs()
                        .partial_cmp(&data[b].as_f64().abs())
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let k = (fraction * data.len() as f64).floor() as usize;
                let mut mask = vec![true; data.len()];
                for &i in idx.iter().take(k) {
                    mask[i] = false;
                }
                apply_mask(model, name, mask);
            }
        }
    }
    Ok(())
}

fn apply_mask<S: Scalar>(model: &mut NmtModel<S>, name: &str, mask: Vec<bool>) {
    let t = model.params.get_mut(name).unwrap();
    for (v, &keep) in t.data.iter_mut().zip(&mask) {
        if !keep {
            *v = S::zero();
        }
    }
    model.masks.insert(name.to_string(), mask);
}

/// Fraction of prunable weights currently masked out.
pub fn pruned_fraction<S: Scalar>(model: &NmtModel<S>) -> f64 {
    let mut total = 0usize;
    let mut zeroed = 0usize;
    for (name, t) in &model.params {
        if !prunable(name) {
            continue;
        }
        total += t.data.len();
        if let Some(mask) = model.masks.get(name) {
            zeroed += mask.iter().filter(|&&k| !k).count();
        }
    }
    if total == 0 {
        0.0
    } else {
        zeroed as f64 / total as f64
    }
}

/// Retrain a pruned model; gradients at masked positions are dropped by the
/// optimizer, so pruned weights stay exactly zero.
pub fn retrain_pruned<S: Scalar>(
    model: &mut NmtModel<S>,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    let reports = train(model, examples, cfg)?;
    debug_assert!(masked_positions_are_zero(model));
    Ok(reports)
}

/// True iff every masked-out weight is exactly zero.
pub fn masked_positions_are_zero<S: Scalar>(model: &NmtModel<S>) -> bool {
    model.masks.iter().all(|(name, mask)| {
        model.params[name]
            .data
            .iter()
            .zip(mask)
            .all(|(v, &keep)| keep || *v == S::zero())
    })
}

/// Bytes of all weight matrices in dense form vs CCS form (values f32,
/// indices u32, column pointers u64), biases and masks excluded.
#[derive(Debug, Clone, Copy)]
pub struct ModelMemoryReport {
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
}

pub fn memory_report<S: Scalar>(model: &NmtModel<S>) -> ModelMemoryReport {
    let mut dense = 0usize;
    let mut sparse = 0usize;
    for (name, t) in &model.params {
        if !prunable(name) {
            continue;
        }
        let n = t.data.len();
        let nnz = t.data.iter().filter(|v| **v != S::zero()).count();
        let cols = if t.dims.len() == 2 { t.dims[1] } else { 1 };
        dense += n * 4;
        sparse += nnz * (4 + 4) + (cols + 1) * 8;
    }
    ModelMemoryReport {
        dense_bytes: dense,
        sparse_bytes: sparse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InferModel, ModelConfig};
    use crate::tensor::Tensor;

    fn tiny_model(seed: u64) -> NmtModel<f32> {
        NmtModel::new(ModelConfig::new(8, 8, 4, 4), seed)
    }

    #[test]
    fn fraction_zero_is_identity_with_all_true_mask() {
        let mut m = tiny_model(1);
        let before = m.clone();
        magnitude_prune(&mut m, 0.0, PruneScope::ClassBlind).unwrap();
        for (name, t) in &m.params {
            assert_eq!(t.data, before.params[name].data);
            if !is_bias(name) {
                assert!(m.masks[name].iter().all(|&k| k));
            }
        }
    }

    #[test]
    fn fraction_one_is_an_error() {
        let mut m = tiny_model(1);
        assert!(magnitude_prune(&mut m, 1.0, PruneScope::ClassBlind).is_err());
        assert!(magnitude_prune(&mut m, 1.5, PruneScope::ClassBlind).is_err());
        assert!(magnitude_prune(&mut m, -0.1, PruneScope::ClassBlind).is_err());
    }

    #[test]
    fn half_fraction_zeroes_exactly_the_smallest_half() {
        // single known 10-value tensor: the 5 smallest magnitudes go
        let mut m = tiny_model(2);
        let vals = vec![0.9f32, -0.1, 0.5, -0.7, 0.05, 0.3, -0.2, 0.8, -0.4, 0.6];
        let name = "attn.w".to_string();
        // give one tensor known values and make everything else a bias-free
        // single prunable target by pruning class-uniform
        m.params.insert(name.clone(), Tensor::new(vec![2, 5], vals).unwrap());
        magnitude_prune(&mut m, 0.5, PruneScope::ClassUniform).unwrap();
        let got = &m.params[&name].data;
        assert_eq!(
            got,
            &vec![0.9f32, 0.0, 0.5, -0.7, 0.0, 0.0, 0.0, 0.8, 0.0, 0.6]
        );
        assert_eq!(
            m.masks[&name],
            vec![true, false, true, true, false, false, false, true, false, true]
        );
    }

    #[test]
    fn biases_are_exempt() {
        let mut m = tiny_model(3);
        magnitude_prune(&mut m, 0.9, PruneScope::ClassBlind).unwrap();
        for (name, t) in &m.params {
            if is_bias(name) {
                assert!(!m.masks.contains_key(name));
                // LSTM biases initialized nonzero stay nonzero
                assert!(t.data.iter().any(|v| *v != 0.0));
            }
        }
    }

    #[test]
    fn class_blind_global_threshold() {
        let mut m = tiny_model(4);
        magnitude_prune(&mut m, 0.6, PruneScope::ClassBlind).unwrap();
        // kept weights all have magnitude >= every pruned weight's original
        // magnitude; verify via the global counts instead: exactly 60%
        let frac = pruned_fraction(&m);
        let total: usize = m
            .params
            .iter()
            .filter(|(n, _)| !is_bias(n))
            .map(|(_, t)| t.data.len())
            .sum();
        let want = (0.6 * total as f64).floor() / total as f64;
        assert!((frac - want).abs() < 1e-12);
        // global threshold: min kept magnitude >= max pruned magnitude is
        // not generally checkable post-zeroing, so check against a fresh
        // copy of the weights
        let fresh = tiny_model(4);
        let mut kept_min = f64::INFINITY;
        let mut pruned_max = 0.0f64;
        for (name, mask) in &m.masks {
            for (i, &keep) in mask.iter().enumerate() {
                let mag = fresh.params[name].data[i].abs() as f64;
                if keep {
                    kept_min = kept_min.min(mag);
                } else {
                    pruned_max = pruned_max.max(mag);
                }
            }
        }
        assert!(kept_min >= pruned_max);
    }

    #[test]
    fn pruning_is_idempotent() {
        for scope in [PruneScope::ClassBlind, PruneScope::ClassUniform] {
            let mut m = tiny_model(5);
            magnitude_prune(&mut m, 0.6, scope).unwrap();
            let once = m.clone();
            magnitude_prune(&mut m, 0.6, scope).unwrap();
            for (name, t) in &m.params {
                assert_eq!(t.data, once.params[name].data, "{name}");
            }
            assert_eq!(m.masks, once.masks);
        }
    }

    #[test]
    fn retraining_keeps_masked_weights_exactly_zero() {
        let mut m = tiny_model(6);
        magnitude_prune(&mut m, 0.5, PruneScope::ClassBlind).unwrap();
        let examples: Vec<TrainExample> = (0..8)
            .map(|i| TrainExample {
                src: crate::model::SentenceInput::plain(vec![4 + (i % 4) as u32, 5]),
                tgt: crate::model::SentenceInput::plain(vec![4 + (i % 4) as u32, 5]),
                alignment: None,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        retrain_pruned(&mut m, &examples, &cfg).unwrap();
        assert!(masked_positions_are_zero(&m));
        // and unmasked weights did move
        let fresh = tiny_model(6);
        let moved = m
            .params
            .iter()
            .any(|(n, t)| t.data != fresh.params[n].data);
        assert!(moved);
    }

    #[test]
    fn zero_epochs_is_unchanged() {
        let mut m = tiny_model(7);
        magnitude_prune(&mut m, 0.5, PruneScope::ClassBlind).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let examples = [TrainExample {
            src: crate::model::SentenceInput::plain(vec![4, 5]),
            tgt: crate::model::SentenceInput::plain(vec![4, 5]),
            alignment: None,
        }];
        retrain_pruned(&mut m, &examples, &cfg).unwrap();
        for (name, t) in &m.params {
            assert_eq!(t.data, before.params[name].data);
        }
    }

    #[test]
    fn sparse_decode_is_token_identical_after_pruning() {
        use crate::decoding::{beam_search, DecodeOptions};
        use crate::model::SentenceInput;
        let mut m = tiny_model(8);
        for (_, t) in m.params.iter_mut() {
            for v in t.data.iter_mut() {
                *v *= 6.0;
            }
        }
        magnitude_prune(&mut m, 0.6, PruneScope::ClassBlind).unwrap();
        let dense = InferModel::dense(&m);
        let sparse = InferModel::sparse(&m);
        let opts = DecodeOptions {
            beam: 3,
            max_len: 8,
            ..DecodeOptions::default()
        };
        for s in 0..10u32 {
            let src = SentenceInput::plain(vec![4 + s % 4, 5 + s % 3]);
            let a = beam_search(&[&dense], &src, &opts).unwrap();
            let b = beam_search(&[&sparse], &src, &opts).unwrap();
            assert_eq!(a.best.tokens, b.best.tokens);
            assert!((a.best.score - b.best.score).abs() < 1e-6);
        }
    }

    #[test]
    fn memory_report_crossover() {
        // large enough that column-pointer overhead does not dominate
        let mut m: NmtModel<f32> = NmtModel::new(ModelConfig::new(8, 8, 16, 32), 9);
        let r0 = memory_report(&m);
        assert!(r0.sparse_bytes > r0.dense_bytes); // dense model: CCS overhead loses
        magnitude_prune(&mut m, 0.7, PruneScope::ClassBlind).unwrap();
        let r1 = memory_report(&m);
        assert!(r1.sparse_bytes < r1.dense_bytes); // 70% zeros: CCS wins
        assert_eq!(r1.dense_bytes, r0.dense_bytes);
    }
}
