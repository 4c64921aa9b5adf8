use crate::bpe::{Vocabulary, BOS};
use crate::error::{Error, Result};
use crate::numeric::kernels::AttentionLayout;
use crate::numeric::{Graph, NodeId, ParamStore, Rng, Scalar, Tensor};

use super::layers::{Builder, DecoderLayer, Embeddings, EncoderLayer, LayerAdapters};
use super::{apply_scheme, check_language, LmModel, ModelConfig, TokenBatch, TrainableScheme};

/// Encoder-decoder sharing one set of embeddings between the encoder input,
/// the decoder input and the output projection.
#[derive(Debug, Clone)]
pub struct NmtModel<F: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<F>,
    pub embeddings: Embeddings,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

/// Translation model with fresh weights everywhere (the random-init baseline).
pub fn build_nmt<F: Scalar>(config: ModelConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<NmtModel<F>> {
    NmtModel::layout(config, vocab, Some(rng))
}

/// Builds the translation model from a finished LM. Encoder layers and the
/// decoder's self-attention/feed-forward blocks (and adapters) copy the LM
/// layers; cross-attention is freshly initialized.
pub fn init_nmt_from_lm<F: Scalar>(lm: &LmModel<F>, rng: &mut Rng) -> Result<NmtModel<F>> {
    let mut nmt = NmtModel::layout(lm.config.clone(), lm.vocab.clone(), Some(rng))?;
    for i in 0..nmt.params.len() {
        let id = crate::numeric::ParamId(i);
        let name = nmt.params.get(id).name.clone();
        let Some(src) = lm_source_name(&name) else {
            continue;
        };
        let src_id = lm
            .params
            .id(&src)
            .ok_or_else(|| Error::Model(format!("LM has no parameter {src} for {name}")))?;
        *nmt.params.value_mut(id) = lm.params.value(src_id).clone();
    }
    Ok(nmt)
}

/// LM parameter a translation-model parameter is copied from.
fn lm_source_name(name: &str) -> Option<String> {
    if name.starts_with("embeddings.") || name.starts_with("encoder.") {
        return Some(name.to_string());
    }
    let rest = name.strip_prefix("decoder.")?;
    let (layer, field) = rest.split_once('.')?;
    let field = if let Some(f) = field.strip_prefix("self_attn.") {
        format!("attn.{f}")
    } else if let Some(f) = field.strip_prefix("self_norm.") {
        format!("attn_norm.{f}")
    } else if field.starts_with("cross_") {
        return None;
    } else {
        field.to_string()
    };
    Some(format!("encoder.{layer}.{field}"))
}

impl<F: Scalar> NmtModel<F> {
    pub(crate) fn layout(config: ModelConfig, vocab: Vocabulary, rng: Option<&mut Rng>) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Vocabulary(format!(
                "config vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng,
        };
        let embeddings = Embeddings::register(&mut b, config.vocab_size, config.max_positions, config.n_languages, d)?;
        let mut encoder = (0..config.n_layers_lm)
            .map(|i| EncoderLayer::register(&mut b, &format!("encoder.layer{i}"), d, config.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = (0..config.n_layers_lm)
            .map(|i| DecoderLayer::register(&mut b, &format!("decoder.layer{i}"), d, config.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        if let Some(dim) = config.adapter_dim {
            for (i, l) in encoder.iter_mut().enumerate() {
                l.adapters = Some(LayerAdapters::register(&mut b, &format!("encoder.layer{i}"), d, dim)?);
            }
            for (i, l) in decoder.iter_mut().enumerate() {
                l.adapters = Some(LayerAdapters::register(&mut b, &format!("decoder.layer{i}"), d, dim)?);
            }
        }
        Ok(NmtModel {
            config,
            vocab,
            params,
            embeddings,
            encoder,
            decoder,
        })
    }

    pub fn set_trainable(&mut self, scheme: TrainableScheme) -> Result<()> {
        apply_scheme(&mut self.params, scheme, self.config.adapter_dim.is_some())
    }

    pub fn token_embedding(&self) -> &Tensor<F> {
        self.params.value(self.embeddings.token)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::Model(format!(
                "sequence length {len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Encoder memory `[batch * src_len, d]`.
    pub fn encode(&self, g: &mut Graph<F>, src: &TokenBatch, src_lang: usize) -> Result<NodeId> {
        check_language(src_lang, self.config.n_languages)?;
        self.check_len(src.len)?;
        let layout = AttentionLayout {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            heads: self.config.n_heads,
            causal: false,
            key_valid: src.key_valid(),
        };
        let mut x = self.embeddings.forward(g, src, src_lang, self.config.dropout)?;
        for layer in &self.encoder {
            x = layer.forward(g, x, &layout, self.config.dropout)?;
        }
        Ok(x)
    }

    /// Decoder states `[batch * tgt_len, d]` for teacher-forced input.
    pub fn decode(
        &self,
        g: &mut Graph<F>,
        memory: NodeId,
        src: &TokenBatch,
        tgt_in: &TokenBatch,
        tgt_lang: usize,
    ) -> Result<NodeId> {
        check_language(tgt_lang, self.config.n_languages)?;
        self.check_len(tgt_in.len)?;
        if src.batch != tgt_in.batch {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![src.batch, src.len],
                rhs: vec![tgt_in.batch, tgt_in.len],
            });
        }
        let self_layout = AttentionLayout {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: tgt_in.len,
            heads: self.config.n_heads,
            causal: true,
            key_valid: tgt_in.key_valid(),
        };
        let cross_layout = AttentionLayout {
            batch: src.batch,
            q_len: tgt_in.len,
            k_len: src.len,
            heads: self.config.n_heads,
            causal: false,
            key_valid: src.key_valid(),
        };
        let mut x = self.embeddings.forward(g, tgt_in, tgt_lang, self.config.dropout)?;
        for layer in &self.decoder {
            x = layer.forward(g, x, memory, &self_layout, &cross_layout, self.config.dropout)?;
        }
        Ok(x)
    }

    pub fn logits(&self, g: &mut Graph<F>, hidden: NodeId) -> Result<NodeId> {
        self.embeddings.logits(g, hidden)
    }

    /// Teacher-forced logits for every target input position,
    /// `[batch * tgt_len, V]`.
    pub fn forward_logits(
        &self,
        g: &mut Graph<F>,
        src: &TokenBatch,
        tgt_in: &TokenBatch,
        src_lang: usize,
        tgt_lang: usize,
    ) -> Result<NodeId> {
        let mem = self.encode(g, src, src_lang)?;
        let h = self.decode(g, mem, src, tgt_in, tgt_lang)?;
        self.logits(g, h)
    }

    /// Teacher-forced cross-entropy. Each target row is `<s> … </s>` (right
    /// padded); the decoder reads all but the last column and predicts all
    /// but the first, ignoring padding.
    pub fn loss(
        &self,
        g: &mut Graph<F>,
        src: &TokenBatch,
        tgt: &TokenBatch,
        src_lang: usize,
        tgt_lang: usize,
        label_smoothing: f64,
    ) -> Result<NodeId> {
        check_language(src_lang, self.config.n_languages)?;
        check_language(tgt_lang, self.config.n_languages)?;
        if (0..tgt.batch).any(|b| tgt.row(b)[0] != BOS) {
            return Err(Error::Model("target rows must start with <s>".into()));
        }
        let t = tgt.len.saturating_sub(1);
        let mut inputs = Vec::with_capacity(tgt.batch * t);
        let mut targets = Vec::with_capacity(tgt.batch * t);
        for b in 0..tgt.batch {
            let row = tgt.row(b);
            inputs.extend_from_slice(&row[..t]);
            targets.extend(row[1..].iter().map(|&x| (x != crate::bpe::PAD).then_some(x as usize)));
        }
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
        if rows.is_empty() {
            return Err(Error::EmptyData("target batch has no tokens after <s>".into()));
        }
        let tgt_in = TokenBatch {
            ids: inputs,
            batch: tgt.batch,
            len: t,
        };
        let mem = self.encode(g, src, src_lang)?;
        let h = self.decode(g, mem, src, &tgt_in, tgt_lang)?;
        let ht = g.gather_rows(h, &rows)?;
        let logits = self.logits(g, ht)?;
        let t: Vec<Option<usize>> = rows.iter().map(|&r| targets[r]).collect();
        g.cross_entropy(logits, &t, label_smoothing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Stream;
    use crate::transformer::build_lm;
    use std::collections::BTreeMap;

    fn lm(v: usize, adapters: bool) -> LmModel<f32> {
        let counts: BTreeMap<String, u64> = (0..v).map(|i| (format!("w{i}"), 1)).collect();
        let vocab = Vocabulary::from_counts(&counts);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            max_positions: 16,
            vocab_size: vocab.len(),
            n_languages: 2,
            ..Default::default()
        };
        let mut rng = Rng::new(5, Stream::Init);
        let mut m = build_lm(cfg, vocab, &mut rng).unwrap();
        if adapters {
            m.attach_adapters(4, &mut rng).unwrap();
        }
        m
    }

    #[test]
    fn copies_lm_layers() {
        let lm = lm(20, true);
        let nmt = init_nmt_from_lm(&lm, &mut Rng::new(1, Stream::Init)).unwrap();
        let enc = nmt.params.value(nmt.encoder[0].attn.wq);
        assert!(enc.bit_eq(lm.params.value(lm.layers[0].attn.wq)));
        let dec = nmt.params.value(nmt.decoder[1].self_attn.wk);
        assert!(dec.bit_eq(lm.params.value(lm.layers[1].attn.wk)));
        let ad = &nmt.decoder[0].adapters.as_ref().unwrap().after_ffn;
        let lad = &lm.layers[0].adapters.as_ref().unwrap().after_ffn;
        assert!(nmt.params.value(ad.w_down).bit_eq(lm.params.value(lad.w_down)));
        assert!(nmt.token_embedding().bit_eq(lm.token_embedding()));
    }

    #[test]
    fn source_name_mapping() {
        assert_eq!(
            lm_source_name("decoder.layer1.self_norm.gain").as_deref(),
            Some("encoder.layer1.attn_norm.gain")
        );
        assert_eq!(
            lm_source_name("decoder.layer0.adapter_attn.w_up").as_deref(),
            Some("encoder.layer0.adapter_attn.w_up")
        );
        assert_eq!(lm_source_name("decoder.layer0.cross_attn.wq"), None);
    }

    #[test]
    fn untrained_loss_near_log_vocab() {
        let lm = lm(300, false);
        let nmt = init_nmt_from_lm(&lm, &mut Rng::new(1, Stream::Init)).unwrap();
        let src = TokenBatch::from_sequences(&[vec![2, 10, 11, 12, 3]]).unwrap();
        let tgt = TokenBatch::from_sequences(&[vec![2, 20, 21, 22, 23, 3]]).unwrap();
        let mut g = Graph::eval(&nmt.params);
        let l = nmt.loss(&mut g, &src, &tgt, 1, 0, 0.0).unwrap();
        let l = g.value(l).data()[0] as f64;
        let ln_v = 305f64.ln();
        assert!((l - ln_v).abs() < 0.1 * ln_v, "{l}");
    }

    #[test]
    fn loss_errors() {
        let lm = lm(20, false);
        let nmt = init_nmt_from_lm(&lm, &mut Rng::new(1, Stream::Init)).unwrap();
        let src = TokenBatch::from_sequences(&[vec![2, 10, 3]]).unwrap();
        let only_bos = TokenBatch::from_sequences(&[vec![2]]).unwrap();
        let mut g = Graph::eval(&nmt.params);
        assert!(matches!(
            nmt.loss(&mut g, &src, &only_bos, 1, 0, 0.0),
            Err(Error::EmptyData(_))
        ));
        let tgt = TokenBatch::from_sequences(&[vec![2, 10, 3]]).unwrap();
        assert!(matches!(
            nmt.loss(&mut g, &src, &tgt, 1, 7, 0.0),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn causal_probe() {
        let lm = lm(20, false);
        let nmt = init_nmt_from_lm(&lm, &mut Rng::new(1, Stream::Init)).unwrap();
        let src = TokenBatch::from_sequences(&[vec![2, 10, 11, 3]]).unwrap();
        let a = TokenBatch::from_sequences(&[vec![2, 12, 13, 14, 15]]).unwrap();
        let b = TokenBatch::from_sequences(&[vec![2, 12, 13, 19, 15]]).unwrap();
        let run = |t: &TokenBatch| {
            let mut g = Graph::eval(&nmt.params);
            let z = nmt.forward_logits(&mut g, &src, t, 1, 0).unwrap();
            g.value(z).clone()
        };
        let (za, zb) = (run(&a), run(&b));
        let v = za.cols();
        assert_eq!(za.data()[..3 * v], zb.data()[..3 * v]);
        assert_ne!(za.data()[3 * v..], zb.data()[3 * v..]);
    }
}
