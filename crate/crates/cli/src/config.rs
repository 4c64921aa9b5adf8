//! Run configuration: a TOML document with one table per concern, plus
//! `--config key.path=value` overrides. Unknown keys are errors.

use std::path::Path;

use relm_core::synthetic::SyntheticPairSpec;
use relm_core::training::TrainConfig;
use relm_core::transformer::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpeConfig {
    /// Merges learned on HMR text.
    pub merges: usize,
    /// Merges learned on the α-sampled HMR+LMR mix.
    pub joint_merges: usize,
    pub alpha: f64,
    /// Sentences in the joint sample; `0` means `2 · min(|HMR|, |LMR|)`.
    pub joint_sample: usize,
    /// Training sentences longer than this many subwords are dropped.
    pub max_len: usize,
}

impl Default for BpeConfig {
    fn default() -> Self {
        BpeConfig {
            merges: 400,
            joint_merges: 800,
            alpha: 0.5,
            joint_sample: 0,
            max_len: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// `1` decodes greedily.
    pub beam: usize,
    pub length_penalty: f64,
    /// Output cap is `max_len_ratio · |src| + max_len_extra` tokens.
    pub max_len_ratio: f64,
    pub max_len_extra: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            length_penalty: 1.0,
            max_len_ratio: 2.0,
            max_len_extra: 10,
        }
    }
}

impl DecodeConfig {
    pub fn max_len(&self, src_len: usize) -> usize {
        (self.max_len_ratio * src_len as f64).ceil() as usize + self.max_len_extra
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bpe: BpeConfig,
    pub decode: DecodeConfig,
    pub synthetic: SyntheticPairSpec,
}

/// Parses a `--config` value as a TOML literal, falling back to a bare
/// string (`scheme=ADAPTERS`).
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key = value` inside `table`, creating tables on the way.
pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed config key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("config key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (k, v) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    set_path(table, k.trim(), parse_value(v.trim()))
}

/// Merges file, overrides and `--seed` into a typed config. The seed goes
/// to both `train.seed` and `synthetic.seed`.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        let v = toml::Value::Integer(s as i64);
        set_path(&mut table, "train.seed", v.clone())?;
        set_path(&mut table, "synthetic.seed", v)?;
    }
    let cfg = RunConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| CliError::Config(e.message().replace('\n', " ")))?;
    cfg.train.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use relm_core::training::Scheme;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = resolve(
            None,
            &[
                "train.scheme=ADAPTERS".into(),
                "train.noise.p_drop=0.2".into(),
                "model.adapter_dim=32".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.train.scheme, Scheme::Adapters);
        assert_eq!(cfg.train.noise.p_drop, 0.2);
        assert_eq!(cfg.model.adapter_dim, Some(32));
        assert_eq!((cfg.train.seed, cfg.synthetic.seed), (9, 9));
    }

    #[test]
    fn typos_are_rejected() {
        let err = resolve(None, &["train.patiense=3".into()], None).unwrap_err();
        assert!(err.to_string().contains("patiense"), "{err}");
        assert!(resolve(None, &["nosuch.key=1".into()], None).is_err());
        assert!(resolve(None, &["train.batch_size=0".into()], None).is_err());
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nmax_steps = 5\nbase_lr = 0.01\n").unwrap();
        let cfg = resolve(Some(&path), &["train.max_steps=7".into()], None).unwrap();
        assert_eq!(cfg.train.max_steps, 7);
        assert_eq!(cfg.train.base_lr, 0.01);
    }
}
