//! The training phases: MLM pretraining, LM fine-tuning, unsupervised and
//! supervised NMT, each with periodic dev evaluation and early stopping.
//!
//! Every phase is a pure function of its inputs, config and seed. Sentences
//! come in as unframed token ids; phases add `<s> … </s>` themselves.

mod lm;
mod noise;
mod nmt;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::{BOS, EOS};
use crate::error::{Error, Result};
use crate::numeric::{adam_step, AdamState, Graph, NodeId, ParamId, ParamStore, Rng, Scalar, Stream, Tensor};
use crate::transformer::MaskConfig;

pub use lm::{finetune_lm, pretrain_mlm};
pub use nmt::{evaluate_bleu, train_supervised, train_unmt, translate_greedy, DevSet};
pub use noise::dae_noise;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scheme {
    Full,
    Adapters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LanguageSet {
    LmrOnly,
    LmrAndHmr,
}

/// Which supervised directions are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Directions {
    Both,
    LmrToHmr,
    HmrToLmr,
}

/// Denoising noise: local shuffle, word drop, word blank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub shuffle_k: usize,
    pub p_drop: f64,
    pub p_blank: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            shuffle_k: 3,
            p_drop: 0.1,
            p_blank: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub checkpoint_every_sentences: usize,
    pub eval_every_updates: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub scheme: Scheme,
    pub languages: LanguageSet,
    pub directions: Directions,
    /// Inverse-sqrt warmup for NMT phases.
    pub warmup: u64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub mask: MaskConfig,
    pub eval_batch_size: usize,
    /// Seed of the fixed dev masks.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            batch_size: 32,
            checkpoint_every_sentences: 200_000,
            eval_every_updates: 3000,
            patience: 10,
            max_steps: 10_000,
            alpha: 0.5,
            seed: 0,
            noise: NoiseConfig::default(),
            scheme: Scheme::Full,
            languages: LanguageSet::LmrAndHmr,
            directions: Directions::Both,
            warmup: 4000,
            clip_norm: 5.0,
            label_smoothing: 0.0,
            mask: MaskConfig::default(),
            eval_batch_size: 64,
            eval_seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0
            || self.checkpoint_every_sentences == 0
            || self.eval_every_updates == 0
            || self.eval_batch_size == 0
        {
            return bad("batch_size, checkpoint_every_sentences, eval_every_updates and eval_batch_size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("base_lr and clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..=0.2).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 0.2]");
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.p_drop) || !(0.0..=1.0).contains(&n.p_blank) {
            return bad("noise probabilities must lie in [0, 1)");
        }
        if self.warmup == 0 {
            return bad("warmup must be positive");
        }
        Ok(())
    }
}

/// One dev evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub step: u64,
    pub sentences_seen: u64,
    pub metric_name: String,
    pub value: f64,
    pub is_best: bool,
}

/// Appends records as JSON lines.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let err = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
    for r in records {
        let line = serde_json::to_string(r).expect("metrics serialize");
        writeln!(f, "{line}").map_err(err)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopMode {
    Min,
    Max,
}

/// Patience-based early stopping with strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub mode: StopMode,
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(mode: StopMode, patience: usize) -> Self {
        EarlyStopper {
            mode,
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn update(&mut self, value: f64) -> StopDecision {
        let improved = match (self.best, self.mode) {
            (None, _) => true,
            (Some(b), StopMode::Max) => value > b,
            (Some(b), StopMode::Min) => value < b,
        };
        if improved {
            self.best = Some(value);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

/// Counts crossings of multiples of a sentence cadence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointClock {
    cadence: u64,
    seen: u64,
}

impl CheckpointClock {
    pub fn new(cadence: u64) -> Self {
        CheckpointClock { cadence, seen: 0 }
    }

    /// Adds `n` sentences and returns how many multiples were crossed.
    pub fn advance(&mut self, n: u64) -> u64 {
        let before = self.seen / self.cadence;
        self.seen += n;
        self.seen / self.cadence - before
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }
}

/// Where a training batch came from; phases record every batch's tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    HmrMonolingual,
    LmrMonolingual,
    Parallel,
}

/// Result of one phase.
#[derive(Debug, Clone)]
pub struct PhaseOutcome<M> {
    pub model: M,
    pub metrics: Vec<MetricsRecord>,
    pub updates: u64,
    pub sentences_seen: u64,
    /// Batches consumed per source.
    pub provenance: BTreeMap<DataSource, u64>,
    pub stopped_early: bool,
}

/// `<s> tokens </s>`, truncated to fit `max_positions`.
pub(crate) fn frame(tokens: &[u32], max_positions: usize) -> Vec<u32> {
    let keep = tokens.len().min(max_positions.saturating_sub(2));
    let mut v = Vec::with_capacity(keep + 2);
    v.push(BOS);
    v.extend_from_slice(&tokens[..keep]);
    v.push(EOS);
    v
}

/// Forward and backward on a training graph. Returns gradients and loss.
pub(crate) fn gradients<F: Scalar>(
    params: &ParamStore<F>,
    dropout_rng: Rng,
    build: impl FnOnce(&mut Graph<F>) -> Result<NodeId>,
) -> Result<(Vec<(ParamId, Tensor<F>)>, f64)> {
    let mut g = Graph::train(params, dropout_rng);
    let loss = build(&mut g)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Model(format!("non-finite training loss {value}")));
    }
    Ok((g.backward(loss)?, value))
}

/// Fold gradients in, clip, Adam step.
pub(crate) fn apply_update<F: Scalar>(
    params: &mut ParamStore<F>,
    adam: &mut AdamState<F>,
    grads: Vec<(ParamId, Tensor<F>)>,
    lr: f64,
    clip_norm: f64,
) {
    params.accumulate(grads);
    params.clip_grad_norm(clip_norm);
    adam_step(params, adam, lr);
}

pub(crate) fn dropout_rng(seed: u64, update: u64) -> Rng {
    Rng::with_tag(seed, Stream::Dropout, update)
}

/// Keeps the parameters of the best evaluation so far.
pub(crate) struct BestKeeper<F: Scalar> {
    snapshot: Option<Vec<Tensor<F>>>,
}

impl<F: Scalar> BestKeeper<F> {
    pub fn new() -> Self {
        BestKeeper { snapshot: None }
    }

    pub fn keep(&mut self, params: &ParamStore<F>) {
        self.snapshot = Some(params.snapshot());
    }

    pub fn restore(self, params: &mut ParamStore<F>) {
        if let Some(s) = self.snapshot {
            params.restore(s);
        }
    }
}
