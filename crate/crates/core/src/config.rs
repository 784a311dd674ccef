//! Flat `key=value` run configuration. Unknown keys are rejected; values are
//! validated when a typed view is built.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every recognised key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("cell", "lstm"),
    ("method", "dense"),
    ("s_target", "0.9"),
    ("lambda_s", "auto"),
    ("gate_init", "5.0"),
    ("gate_lr", "100"),
    ("gate_momentum", "0.9"),
    ("batch_size", "32"),
    ("epochs_stage1", "30"),
    ("epochs_stage2", "10"),
    ("lr_init_stage1", "0.01"),
    ("lr_final", "0.00001"),
    ("lr_init_stage2", "0.001"),
    ("weight_decay", "0.00001"),
    ("dropout_dense_rnn", "0.35"),
    ("dropout_dense_attn", "0.1"),
    ("dropout_sparse_rnn", "0.11"),
    ("dropout_sparse_attn", "0.03"),
    ("rnn_size", "64"),
    ("word_size", "32"),
    ("attn_size", "64"),
    ("feat_size", "32"),
    ("min_freq", "5"),
    ("max_len", "20"),
    ("gradual_freq", "auto"),
    ("scheme", "blind"),
    ("retrain_epochs", "10"),
    ("beam", "3"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the assignments in `text`. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    /// `None` for the literal `auto`.
    pub fn parsed_or_auto<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.get(key)? == "auto" {
            Ok(None)
        } else {
            self.parsed(key).map(Some)
        }
    }

    /// Sorted `key=value` lines; parsing the echo reproduces the config.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
