//! Parameter handles for the building blocks and their graph forwards.

use crate::error::Result;
use crate::numeric::kernels::AttentionLayout;
use crate::numeric::{Graph, NodeId, ParamId, ParamStore, Rng, Scalar};

pub const INIT_STD: f64 = 0.02;

/// Registers parameters; with no rng every weight starts at zero (used to
/// lay out a model before loading its values).
pub(crate) struct Builder<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub rng: Option<&'a mut Rng>,
}

impl<F: Scalar> Builder<'_, F> {
    pub fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => self.store.add_normal(name, shape, INIT_STD, rng),
            None => self.store.add_const(name, shape, 0.0),
        }
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.add_const(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.add_const(name, shape, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub(crate) fn register<F: Scalar>(b: &mut Builder<F>, prefix: &str, d: usize) -> Result<Self> {
        Ok(AttentionParams {
            wq: b.weight(format!("{prefix}.wq"), &[d, d])?,
            wk: b.weight(format!("{prefix}.wk"), &[d, d])?,
            wv: b.weight(format!("{prefix}.wv"), &[d, d])?,
            wo: b.weight(format!("{prefix}.wo"), &[d, d])?,
        })
    }

    pub(crate) fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        xq: NodeId,
        xkv: NodeId,
        layout: AttentionLayout,
    ) -> Result<NodeId> {
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let a = g.attention(q, k, v, layout)?;
        g.matmul(a, wo)
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub(crate) fn register<F: Scalar>(b: &mut Builder<F>, prefix: &str, d: usize) -> Result<Self> {
        Ok(NormParams {
            gain: b.ones(format!("{prefix}.gain"), &[d])?,
            bias: b.zeros(format!("{prefix}.bias"), &[d])?,
        })
    }

    pub(crate) fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: NodeId) -> Result<NodeId> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub(crate) fn register<F: Scalar>(
        b: &mut Builder<F>,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            w1: b.weight(format!("{prefix}.w1"), &[d, hidden])?,
            b1: b.zeros(format!("{prefix}.b1"), &[hidden])?,
            w2: b.weight(format!("{prefix}.w2"), &[hidden, d])?,
            b2: b.zeros(format!("{prefix}.b2"), &[d])?,
        })
    }

    pub(crate) fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: NodeId) -> Result<NodeId> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        g.add_bias(o, b2)
    }
}

/// Residual bottleneck: `x + gelu(x·W_down + b_down)·W_up + b_up`.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

impl AdapterParams {
    pub(crate) fn register<F: Scalar>(
        b: &mut Builder<F>,
        prefix: &str,
        d: usize,
        bottleneck: usize,
    ) -> Result<Self> {
        Ok(AdapterParams {
            w_down: b.weight(format!("{prefix}.w_down"), &[d, bottleneck])?,
            b_down: b.zeros(format!("{prefix}.b_down"), &[bottleneck])?,
            w_up: b.zeros(format!("{prefix}.w_up"), &[bottleneck, d])?,
            b_up: b.zeros(format!("{prefix}.b_up"), &[d])?,
        })
    }

    pub(crate) fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: NodeId) -> Result<NodeId> {
        let (wd, bd, wu, bu) = (
            g.param(self.w_down),
            g.param(self.b_down),
            g.param(self.w_up),
            g.param(self.b_up),
        );
        let h = g.matmul(x, wd)?;
        let h = g.add_bias(h, bd)?;
        let h = g.gelu(h);
        let u = g.matmul(h, wu)?;
        let u = g.add_bias(u, bu)?;
        g.add(x, u)
    }

    /// Parameters per adapter for model width `d` and bottleneck `b`.
    pub fn parameter_count(d: usize, b: usize) -> usize {
        2 * d * b + b + d
    }
}

/// The two adapters of one layer.
#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub after_attn: AdapterParams,
    pub after_ffn: AdapterParams,
}

impl LayerAdapters {
    pub(crate) fn register<F: Scalar>(
        b: &mut Builder<F>,
        prefix: &str,
        d: usize,
        bottleneck: usize,
    ) -> Result<Self> {
        Ok(LayerAdapters {
            after_attn: AdapterParams::register(b, &format!("{prefix}.adapter_attn"), d, bottleneck)?,
            after_ffn: AdapterParams::register(b, &format!("{prefix}.adapter_ffn"), d, bottleneck)?,
        })
    }
}

fn maybe_adapt<F: Scalar>(g: &mut Graph<F>, a: Option<&AdapterParams>, x: NodeId) -> Result<NodeId> {
    match a {
        Some(a) => a.forward(g, x),
        None => Ok(x),
    }
}

/// Post-norm self-attention + feed-forward layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub attn_norm: NormParams,
    pub ffn: FeedForward,
    pub ffn_norm: NormParams,
    pub adapters: Option<LayerAdapters>,
}

impl EncoderLayer {
    pub(crate) fn register<F: Scalar>(
        b: &mut Builder<F>,
        prefix: &str,
        d: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: AttentionParams::register(b, &format!("{prefix}.attn"), d)?,
            attn_norm: NormParams::register(b, &format!("{prefix}.attn_norm"), d)?,
            ffn: FeedForward::register(b, &format!("{prefix}.ffn"), d, ffn_dim)?,
            ffn_norm: NormParams::register(b, &format!("{prefix}.ffn_norm"), d)?,
            adapters: None,
        })
    }

    pub(crate) fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        x: NodeId,
        layout: &AttentionLayout,
        p_drop: f64,
    ) -> Result<NodeId> {
        let a = self.attn.forward(g, x, x, layout.clone())?;
        let a = g.dropout(a, p_drop);
        let x = g.add(x, a)?;
        let x = self.attn_norm.forward(g, x)?;
        let x = maybe_adapt(g, self.adapters.as_ref().map(|a| &a.after_attn), x)?;
        let f = self.ffn.forward(g, x)?;
        let f = g.dropout(f, p_drop);
        let x = g.add(x, f)?;
        let x = self.ffn_norm.forward(g, x)?;
        maybe_adapt(g, self.adapters.as_ref().map(|a| &a.after_ffn), x)
    }
}

/// Causal self-attention, cross-attention and feed-forward, post-norm.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub self_norm: NormParams,
    pub cross_attn: AttentionParams,
    pub cross_norm: NormParams,
    pub ffn: FeedForward,
    pub ffn_norm: NormParams,
    pub adapters: Option<LayerAdapters>,
}

impl DecoderLayer {
    pub(crate) fn register<F: Scalar>(
        b: &mut Builder<F>,
        prefix: &str,
        d: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: AttentionParams::register(b, &format!("{prefix}.self_attn"), d)?,
            self_norm: NormParams::register(b, &format!("{prefix}.self_norm"), d)?,
            cross_attn: AttentionParams::register(b, &format!("{prefix}.cross_attn"), d)?,
            cross_norm: NormParams::register(b, &format!("{prefix}.cross_norm"), d)?,
            ffn: FeedForward::register(b, &format!("{prefix}.ffn"), d, ffn_dim)?,
            ffn_norm: NormParams::register(b, &format!("{prefix}.ffn_norm"), d)?,
            adapters: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        x: NodeId,
        memory: NodeId,
        self_layout: &AttentionLayout,
        cross_layout: &AttentionLayout,
        p_drop: f64,
    ) -> Result<NodeId> {
        let a = self.self_attn.forward(g, x, x, self_layout.clone())?;
        let a = g.dropout(a, p_drop);
        let x = g.add(x, a)?;
        let x = self.self_norm.forward(g, x)?;
        let x = maybe_adapt(g, self.adapters.as_ref().map(|a| &a.after_attn), x)?;
        let c = self.cross_attn.forward(g, x, memory, cross_layout.clone())?;
        let c = g.dropout(c, p_drop);
        let x = g.add(x, c)?;
        let x = self.cross_norm.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let f = g.dropout(f, p_drop);
        let x = g.add(x, f)?;
        let x = self.ffn_norm.forward(g, x)?;
        maybe_adapt(g, self.adapters.as_ref().map(|a| &a.after_ffn), x)
    }
}

/// Token, position and language tables plus the output bias. The output
/// projection is the token table itself.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub token: ParamId,
    pub position: ParamId,
    pub language: ParamId,
    pub output_bias: ParamId,
}

impl Embeddings {
    pub(crate) fn register<F: Scalar>(
        b: &mut Builder<F>,
        vocab: usize,
        max_positions: usize,
        n_languages: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(Embeddings {
            token: b.weight("embeddings.token".into(), &[vocab, d])?,
            position: b.weight("embeddings.position".into(), &[max_positions, d])?,
            language: b.weight("embeddings.language".into(), &[n_languages, d])?,
            output_bias: b.zeros("embeddings.output_bias".into(), &[vocab])?,
        })
    }

    /// Sum of the three embeddings for a padded batch, then dropout.
    pub(crate) fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        batch: &super::TokenBatch,
        language: usize,
        p_drop: f64,
    ) -> Result<NodeId> {
        let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let (tok, pos, lang) = (g.param(self.token), g.param(self.position), g.param(self.language));
        let t = g.embedding(tok, &ids)?;
        let p = g.embedding(pos, &positions)?;
        let l = g.embedding(lang, &vec![language; ids.len()])?;
        let x = g.add(t, p)?;
        let x = g.add(x, l)?;
        Ok(g.dropout(x, p_drop))
    }

    /// `h·Eᵀ + b`.
    pub(crate) fn logits<F: Scalar>(&self, g: &mut Graph<F>, h: NodeId) -> Result<NodeId> {
        let (tok, bias) = (g.param(self.token), g.param(self.output_bias));
        let z = g.matmul_nt(h, tok)?;
        g.add_bias(z, bias)
    }
}
