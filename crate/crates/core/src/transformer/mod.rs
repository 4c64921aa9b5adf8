//! The masked LM, the encoder-decoder built from it, adapters, vocabulary
//! extension of the tied embeddings, freezing and checkpoints.
//!
//! Both models keep every tensor in one [`ParamStore`]; the output
//! projection is never a separate tensor but the token table read through
//! `matmul_nt`, so tying holds by construction.

mod checkpoint;
mod config;
mod infer;
mod layers;
mod lm;
mod nmt;

use crate::bpe::PAD;
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Scalar};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CheckpointMeta,
    ModelState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use infer::{DecoderState, EncodedSource};
pub use layers::{
    AdapterParams, AttentionParams, DecoderLayer, Embeddings, EncoderLayer, FeedForward,
    LayerAdapters, NormParams, INIT_STD,
};
pub use lm::{build_lm, mask_batch, LmModel, MaskConfig};
pub use nmt::{build_nmt, init_nmt_from_lm, NmtModel};

/// A right-padded `[batch, len]` matrix of token indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::EmptyData("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            len,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// Non-padding flags, one per cell.
    pub fn key_valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }
}

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainableScheme {
    All,
    AdaptersAndEmbeddings,
}

/// Parameters that stay trainable under [`TrainableScheme::AdaptersAndEmbeddings`].
/// Decoder cross-attention has no pretrained counterpart, so it trains too.
pub fn trains_under_adapters(name: &str) -> bool {
    name.starts_with("embeddings.")
        || name.contains(".adapter_")
        || name.contains(".cross_attn.")
        || name.contains(".cross_norm.")
}

pub(crate) fn apply_scheme<F: Scalar>(
    store: &mut ParamStore<F>,
    scheme: TrainableScheme,
    has_adapters: bool,
) -> Result<()> {
    match scheme {
        TrainableScheme::All => store.set_all_trainable(true),
        TrainableScheme::AdaptersAndEmbeddings => {
            if !has_adapters {
                return Err(Error::Model(
                    "ADAPTERS_AND_EMBEDDINGS requires attached adapters".into(),
                ));
            }
            for p in store.iter_mut() {
                p.trainable = trains_under_adapters(&p.name);
            }
        }
    }
    Ok(())
}

pub(crate) fn check_language(language: usize, n_languages: usize) -> Result<()> {
    if language >= n_languages {
        return Err(Error::UnknownLanguage(format!(
            "language index {language} but the model has {n_languages} language rows"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_padding() {
        let b = TokenBatch::from_sequences(&[vec![5, 6, 7], vec![8]]).unwrap();
        assert_eq!(b.ids, [5, 6, 7, 8, 0, 0]);
        assert_eq!(b.key_valid(), [true, true, true, true, false, false]);
        assert!(TokenBatch::from_sequences::<Vec<u32>>(&[]).is_err());
    }
}
