use crate::bpe::{Vocabulary, BOS, EOS, MASK, NUM_SPECIAL, PAD};
use crate::error::{Error, Result};
use crate::numeric::kernels::{self, AttentionLayout};
use crate::numeric::{Graph, NodeId, ParamStore, Rng, Scalar, Tensor};

use super::layers::{Builder, Embeddings, EncoderLayer, LayerAdapters};
use super::{apply_scheme, check_language, ModelConfig, TokenBatch, TrainableScheme};

/// Masked LM: embeddings, a post-norm encoder stack and the tied projection.
#[derive(Debug, Clone)]
pub struct LmModel<F: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<F>,
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
}

/// Builds an LM with fresh weights: `N(0, 0.02²)` everywhere except norm
/// gains (1) and biases (0).
pub fn build_lm<F: Scalar>(config: ModelConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<LmModel<F>> {
    LmModel::layout(config, vocab, Some(rng))
}

impl<F: Scalar> LmModel<F> {
    /// Registers every tensor; weights are zero when `rng` is `None`.
    pub(crate) fn layout(config: ModelConfig, vocab: Vocabulary, mut rng: Option<&mut Rng>) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Vocabulary(format!(
                "config vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamStore::new();
        let d = config.d_model;
        let mut b = Builder {
            store: &mut params,
            rng: rng.as_deref_mut(),
        };
        let embeddings = Embeddings::register(&mut b, config.vocab_size, config.max_positions, config.n_languages, d)?;
        let layers = (0..config.n_layers_lm)
            .map(|i| EncoderLayer::register(&mut b, &format!("encoder.layer{i}"), d, config.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let adapter_dim = config.adapter_dim;
        let mut model = LmModel {
            config: ModelConfig {
                adapter_dim: None,
                ..config
            },
            vocab,
            params,
            embeddings,
            layers,
        };
        if let Some(dim) = adapter_dim {
            model.register_adapters(dim, rng)?;
        }
        Ok(model)
    }

    fn register_adapters(&mut self, dim: usize, rng: Option<&mut Rng>) -> Result<()> {
        let d = self.config.d_model;
        let mut b = Builder {
            store: &mut self.params,
            rng,
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.adapters = Some(LayerAdapters::register(&mut b, &format!("encoder.layer{i}"), d, dim)?);
        }
        self.config.adapter_dim = Some(dim);
        Ok(())
    }

    /// Inserts two near-identity adapters per layer (`w_up = 0`).
    pub fn attach_adapters(&mut self, adapter_dim: usize, rng: &mut Rng) -> Result<()> {
        if self.config.adapter_dim.is_some() {
            return Err(Error::Model("adapters are already attached".into()));
        }
        if adapter_dim == 0 {
            return Err(Error::Config("adapter_dim must be positive".into()));
        }
        self.register_adapters(adapter_dim, Some(rng))
    }

    pub fn set_trainable(&mut self, scheme: TrainableScheme) -> Result<()> {
        apply_scheme(&mut self.params, scheme, self.config.adapter_dim.is_some())
    }

    pub fn has_adapters(&self) -> bool {
        self.config.adapter_dim.is_some()
    }

    /// Token table, which doubles as the output projection.
    pub fn token_embedding(&self) -> &Tensor<F> {
        self.params.value(self.embeddings.token)
    }

    /// Encoder states `[batch * len, d]`.
    pub fn encode(&self, g: &mut Graph<F>, batch: &TokenBatch, language: usize) -> Result<NodeId> {
        check_language(language, self.config.n_languages)?;
        if batch.len > self.config.max_positions {
            return Err(Error::Model(format!(
                "sequence length {} exceeds max_positions {}",
                batch.len, self.config.max_positions
            )));
        }
        let layout = AttentionLayout {
            batch: batch.batch,
            q_len: batch.len,
            k_len: batch.len,
            heads: self.config.n_heads,
            causal: false,
            key_valid: batch.key_valid(),
        };
        let mut x = self.embeddings.forward(g, batch, language, self.config.dropout)?;
        for layer in &self.layers {
            x = layer.forward(g, x, &layout, self.config.dropout)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for the given rows of `hidden`.
    pub fn logits(&self, g: &mut Graph<F>, hidden: NodeId) -> Result<NodeId> {
        self.embeddings.logits(g, hidden)
    }

    /// Mean cross-entropy over the positions with a target. With no target
    /// the loss is zero (and a warning is logged).
    pub fn mlm_loss(
        &self,
        g: &mut Graph<F>,
        masked: &TokenBatch,
        targets: &[Option<u32>],
        language: usize,
    ) -> Result<NodeId> {
        if targets.len() != masked.ids.len() {
            return Err(Error::Shape {
                op: "mlm_loss",
                lhs: vec![masked.batch, masked.len],
                rhs: vec![targets.len()],
            });
        }
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
        if rows.is_empty() {
            log::warn!("MLM batch has no targets; loss defined as 0");
            check_language(language, self.config.n_languages)?;
            return Ok(g.input(Tensor::scalar(F::zero())));
        }
        let h = self.encode(g, masked, language)?;
        let ht = g.gather_rows(h, &rows)?;
        let logits = self.logits(g, ht)?;
        let t: Vec<Option<usize>> = rows.iter().map(|&r| targets[r].map(|t| t as usize)).collect();
        g.cross_entropy(logits, &t, 0.0)
    }

    /// Logits `h·Eᵀ + b` for one fixed hidden vector.
    pub fn logits_for_hidden(&self, h: &[F]) -> Vec<F> {
        let e = self.token_embedding();
        let mut z = kernels::matmul_nt(h, e.data(), 1, self.config.d_model, e.rows());
        kernels::add_bias(&mut z, self.params.value(self.embeddings.output_bias).data());
        z
    }

    /// Appends rows for the tokens `new_vocab` adds. Old rows are untouched,
    /// new rows are drawn from `N(0, σ̂²)` with σ̂ the standard deviation of
    /// the pretrained table, and the output bias grows by zeros. Also adds
    /// the LMR language row if missing.
    pub fn extend_embeddings(mut self, new_vocab: &Vocabulary, rng: &mut Rng) -> Result<Self> {
        if !new_vocab.extends(&self.vocab) {
            return Err(Error::Vocabulary(
                "new vocabulary does not keep the pretrained indices".into(),
            ));
        }
        let old = self.token_embedding().rows();
        if old != self.vocab.len() {
            return Err(Error::Vocabulary(format!(
                "model has {old} embedding rows for a vocabulary of {}",
                self.vocab.len()
            )));
        }
        let k = new_vocab.len() - old;
        if k > 0 {
            let sigma = std_dev(self.token_embedding().data());
            let rows: Vec<F> = (0..k * self.config.d_model).map(|_| F::of(rng.normal(0.0, sigma))).collect();
            self.params.append_rows(self.embeddings.token, &rows);
            self.params.append_rows(self.embeddings.output_bias, &vec![F::zero(); k]);
        }
        self.vocab = new_vocab.clone();
        self.config.vocab_size = new_vocab.len();
        self.ensure_lmr_language();
        Ok(self)
    }

    /// Adds the LMR language-embedding row as a copy of the HMR row.
    pub fn ensure_lmr_language(&mut self) {
        if self.config.n_languages < 2 {
            let hmr = self.params.value(self.embeddings.language).row(0).to_vec();
            self.params.append_rows(self.embeddings.language, &hmr);
            self.config.n_languages = 2;
        }
    }
}

/// Population standard deviation, accumulated in `f64`.
pub(crate) fn std_dev<F: Scalar>(xs: &[F]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    (xs.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// BERT-style masking probabilities.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub select_prob: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            select_prob: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// Selects each non-frame, non-pad token w.p. `select_prob`; a selected
/// token becomes `<mask>` (0.8), a random non-special token (0.1) or stays
/// (0.1). Targets hold the original index at selected cells.
pub fn mask_batch(
    batch: &TokenBatch,
    vocab_size: usize,
    cfg: &MaskConfig,
    rng: &mut Rng,
) -> (TokenBatch, Vec<Option<u32>>) {
    let mut out = batch.clone();
    let mut targets = vec![None; batch.ids.len()];
    let n_regular = vocab_size.saturating_sub(NUM_SPECIAL);
    for (cell, t) in out.ids.iter_mut().zip(targets.iter_mut()) {
        if matches!(*cell, PAD | BOS | EOS) || !rng.bernoulli(cfg.select_prob) {
            continue;
        }
        *t = Some(*cell);
        let u = rng.uniform();
        if u < cfg.mask_prob {
            *cell = MASK;
        } else if u < cfg.mask_prob + cfg.random_prob && n_regular > 0 {
            *cell = (NUM_SPECIAL + rng.below(n_regular)) as u32;
        }
    }
    (out, targets)
}
