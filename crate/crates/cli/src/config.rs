//! Flat `key=value` run configuration with built-in defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Every recognized key with its default. Empty means unset.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "7"),
    // corpus
    ("n_examples", "1429"),
    ("seq_len", "19-21"),
    ("task_classes", "2"),
    ("bias_groups", "2"),
    ("task_vocab", "4"),
    ("bias_vocab", "4"),
    ("ent_vocab", "2"),
    ("neut_vocab", "8"),
    ("task_carriers", "9"),
    ("ent_carriers", "1"),
    ("bias_carriers", "9"),
    ("regime", "redundant"),
    ("designated", "0"),
    ("noise_rate", "0.35"),
    ("bias_noise_rate", "0.25"),
    ("reliability_spread", "0.3"),
    ("shuffle_bias_labels", "false"),
    // model
    ("emb_dim", "16"),
    ("hidden", "32"),
    ("embeddings", ""),
    // training
    ("epochs", "10"),
    ("bias_epochs", "30"),
    ("batch_size", "16"),
    ("optimizer", "adam"),
    ("lr", "0.003"),
    ("target", "0.7"),
    ("bias_target", "0.5"),
    ("multiplier_step", "0.5"),
    ("multiplier_rule", "symmetric"),
    ("transition_weight", "0"),
    // debiasing
    ("variant", "energy"),
    ("p_A", "0.5"),
    ("gamma", "1"),
    ("prob_threshold", "0.5"),
    ("normalize", "true"),
    ("rerank_budget", ""),
    // evaluation
    ("probe_epochs", "10"),
    ("task_metric", "accuracy"),
    ("split", "test"),
    // sweep
    ("sweep_p_a", "0.3,0.5,0.7"),
    ("sweep_targets", "0.3,0.5,0.7"),
    ("sweep_gammas", "1"),
    // inputs
    ("data_dir", ""),
    ("oracle", ""),
    ("task", ""),
];

/// Accepted spellings that map onto a canonical key.
const ALIASES: &[(&str, &str)] = &[
    ("require_carriers", "task_carriers"),
    ("p_a", "p_A"),
    ("s_star", "target"),
];

/// Keys naming input files or directories.
pub const PATH_KEYS: &[&str] = &["data_dir", "oracle", "task", "embeddings"];

fn canonical(key: &str) -> Result<&'static str, CliError> {
    let key = key.replace('-', "_");
    if let Some((_, to)) = ALIASES.iter().find(|(from, _)| *from == key) {
        return Ok(to);
    }
    DEFAULTS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(k, _)| *k)
        .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = canonical(key)?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Applies `--key value` pairs.
    pub fn apply_flags(&mut self, args: &[String]) -> Result<(), CliError> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected --key, found `{flag}`")))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            let value = it
                .next()
                .ok_or_else(|| CliError::Config(format!("flag --{key} needs a value")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        let k = canonical(key).expect("known key");
        &self.values[k]
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("bad value `{raw}` for {key}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("bad entry `{s}` in {key}: {e}")))
            })
            .collect()
    }

    /// A set path, or an error naming the missing key.
    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::Config(format!("`{key}` is required"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        match self.raw(key) {
            "" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    /// Sorted `key=value` lines; parsing them back gives an equal config.
    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
