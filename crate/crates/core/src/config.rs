//! Flat key=value run configuration. Files are UTF-8, one `key = value` per
//! line, `#` comments; command-line overrides are applied after the file.
//! Unknown keys are hard errors so typos cannot silently fall back to
//! defaults.

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Every recognized key with its documented default.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("embed_size", "64"),
    ("rnn_size", "64"),
    ("num_layers", "2"),
    ("bidirectional", "true"),
    ("dropout", "0.0"),
    ("max_len", "256"),
    ("src_vocab_size", "50000"),
    ("tgt_vocab_size", "50000"),
    ("case_feature", "false"),
    ("epochs", "10"),
    ("batch_size", "16"),
    ("learning_rate", "1.0"),
    ("lr_decay", "0.7"),
    ("start_decay_epoch", "9"),
    ("clip_norm", "5.0"),
    ("guided_alignment_weight", "0.0"),
    ("guided_alignment_decay", "0.9"),
    ("feature_loss_weight", "1.0"),
    ("beam", "5"),
    ("batch", "1"),
    ("nbest", "1"),
    ("beta", "1.0"),
    ("lm_order", "3"),
    ("prune_fraction", "0.6"),
    ("prune_scope", "class-blind"),
    ("bpe_merges", "1000"),
    ("align_iterations", "5"),
    ("align_diagonal", "4.0"),
    ("politeness", ""),
    ("lowercase", "false"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: IndexMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KNOWN_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Parse a config file's text over the defaults.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Set one value; unknown keys are hard errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unknown config key: {key}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected an integer, got {:?}", self.get(key))))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected a number, got {:?}", self.get(key))))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!(
                "{key}: expected true/false, got {other:?}"
            ))),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected an integer, got {:?}", self.get(key))))
    }
}
