//! Tape-free incremental decoding with per-hypothesis key/value caches.
//!
//! Each step recomputes nothing: the new position's keys and values are
//! appended to the cache and the query attends over it. The arithmetic per
//! row matches the graph kernels, so a step reproduces the teacher-forced
//! logits of the same prefix.

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, axpy, dot};
use crate::numeric::{Graph, Scalar};

use super::layers::{AdapterParams, AttentionParams, NormParams};
use super::{check_language, NmtModel, TokenBatch};

/// Cross-attention keys and values of one encoded source, per decoder layer.
#[derive(Debug, Clone)]
pub struct EncodedSource<F> {
    pub len: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

/// Self-attention cache of one partial hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState<F> {
    pub len: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

/// Largest number of sentences encoded in one graph.
const ENCODE_CHUNK: usize = 64;

/// Attention of one query row over `n` cached keys.
fn attend<F: Scalar>(q: &[F], keys: &[F], values: &[F], n: usize, heads: usize, out: &mut [F]) {
    let d = q.len();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut p = vec![F::zero(); n];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        let qh = &q[hs.clone()];
        let mut max = F::neg_infinity();
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(qh, &keys[j * d..][hs.clone()]) * scale;
            max = max.max(*pj);
        }
        let mut sum = F::zero();
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        let o = &mut out[hs.clone()];
        for (j, pj) in p.iter_mut().enumerate() {
            if *pj != F::zero() {
                *pj /= sum;
                axpy(*pj, &values[j * d..][hs.clone()], o);
            }
        }
    }
}

fn add_in_place<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl<F: Scalar> NmtModel<F> {
    fn mat(&self, id: crate::numeric::ParamId) -> &[F] {
        self.params.value(id).data()
    }

    fn project(&self, x: &[F], w: crate::numeric::ParamId, rows: usize) -> Vec<F> {
        let t = self.params.value(w);
        kernels::matmul_nn(x, t.data(), rows, t.rows(), t.cols())
    }

    fn norm(&self, x: &[F], n: &NormParams) -> Vec<F> {
        kernels::layer_norm_forward(x, self.mat(n.gain), self.mat(n.bias)).0
    }

    fn adapt(&self, x: Vec<F>, a: Option<&AdapterParams>, rows: usize) -> Vec<F> {
        let Some(a) = a else { return x };
        let mut h = self.project(&x, a.w_down, rows);
        kernels::add_bias(&mut h, self.mat(a.b_down));
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let mut u = self.project(&h, a.w_up, rows);
        kernels::add_bias(&mut u, self.mat(a.b_up));
        x.iter().zip(&u).map(|(&a, &b)| a + b).collect()
    }

    /// Encodes sources in chunks and precomputes cross-attention keys and
    /// values for every decoder layer.
    pub fn encode_sources<S: AsRef<[u32]>>(&self, sources: &[S], src_lang: usize) -> Result<Vec<EncodedSource<F>>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(ENCODE_CHUNK) {
            if chunk.iter().any(|s| s.as_ref().is_empty()) {
                return Err(Error::EmptyData("cannot decode an empty source".into()));
            }
            let batch = TokenBatch::from_sequences(chunk)?;
            let mut g = Graph::eval(&self.params);
            let mem = self.encode(&mut g, &batch, src_lang)?;
            let mem = g.value(mem).data();
            let rows = batch.batch * batch.len;
            let per_layer: Vec<(Vec<F>, Vec<F>)> = self
                .decoder
                .iter()
                .map(|l| (self.project(mem, l.cross_attn.wk, rows), self.project(mem, l.cross_attn.wv, rows)))
                .collect();
            for (b, s) in chunk.iter().enumerate() {
                let n = s.as_ref().len();
                let span = b * batch.len * d..(b * batch.len + n) * d;
                out.push(EncodedSource {
                    len: n,
                    keys: per_layer.iter().map(|(k, _)| k[span.clone()].to_vec()).collect(),
                    values: per_layer.iter().map(|(_, v)| v[span.clone()].to_vec()).collect(),
                });
            }
        }
        Ok(out)
    }

    pub fn start_state(&self) -> DecoderState<F> {
        let n = self.decoder.len();
        DecoderState {
            len: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn attention_rows<'a>(
        &self,
        p: &AttentionParams,
        q_in: &[F],
        rows: usize,
        kv: impl Fn(usize) -> (&'a [F], &'a [F]),
    ) -> Vec<F> {
        let d = self.config.d_model;
        let q = self.project(q_in, p.wq, rows);
        let mut a = vec![F::zero(); rows * d];
        for r in 0..rows {
            let (keys, values) = kv(r);
            attend(&q[r * d..(r + 1) * d], keys, values, keys.len() / d, self.config.n_heads, &mut a[r * d..(r + 1) * d]);
        }
        self.project(&a, p.wo, rows)
    }

    /// Feeds one token per hypothesis and returns next-token log-probs,
    /// `[rows, V]` flattened. `sources[r]` is the source of `states[r]`.
    pub fn decode_step(
        &self,
        sources: &[&EncodedSource<F>],
        states: &mut [DecoderState<F>],
        tokens: &[u32],
        tgt_lang: usize,
    ) -> Result<Vec<F>> {
        check_language(tgt_lang, self.config.n_languages)?;
        let rows = tokens.len();
        if sources.len() != rows || states.len() != rows {
            return Err(Error::Shape {
                op: "decode_step",
                lhs: vec![sources.len(), states.len()],
                rhs: vec![rows],
            });
        }
        let d = self.config.d_model;
        let (tok, pos, lang) = (
            self.params.value(self.embeddings.token),
            self.params.value(self.embeddings.position),
            self.params.value(self.embeddings.language),
        );
        let mut x = Vec::with_capacity(rows * d);
        for (r, &t) in tokens.iter().enumerate() {
            let p = states[r].len;
            if t as usize >= tok.rows() {
                return Err(Error::Vocabulary(format!("token index {t} outside a vocabulary of {}", tok.rows())));
            }
            if p >= self.config.max_positions {
                return Err(Error::Model(format!("decoding past max_positions {}", self.config.max_positions)));
            }
            let (te, pe, le) = (tok.row(t as usize), pos.row(p), lang.row(tgt_lang));
            x.extend((0..d).map(|j| te[j] + pe[j] + le[j]));
        }
        for (l, layer) in self.decoder.iter().enumerate() {
            let k = self.project(&x, layer.self_attn.wk, rows);
            let v = self.project(&x, layer.self_attn.wv, rows);
            for (r, s) in states.iter_mut().enumerate() {
                s.keys[l].extend_from_slice(&k[r * d..(r + 1) * d]);
                s.values[l].extend_from_slice(&v[r * d..(r + 1) * d]);
            }
            let cached: &[DecoderState<F>] = states;
            let a = self.attention_rows(&layer.self_attn, &x, rows, |r| {
                (&cached[r].keys[l][..], &cached[r].values[l][..])
            });
            add_in_place(&mut x, &a);
            let x1 = self.norm(&x, &layer.self_norm);
            let mut x1 = self.adapt(x1, layer.adapters.as_ref().map(|a| &a.after_attn), rows);
            let c = self.attention_rows(&layer.cross_attn, &x1, rows, |r| {
                (&sources[r].keys[l][..], &sources[r].values[l][..])
            });
            add_in_place(&mut x1, &c);
            let x2 = self.norm(&x1, &layer.cross_norm);
            let mut h = self.project(&x2, layer.ffn.w1, rows);
            kernels::add_bias(&mut h, self.mat(layer.ffn.b1));
            h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let mut f = self.project(&h, layer.ffn.w2, rows);
            kernels::add_bias(&mut f, self.mat(layer.ffn.b2));
            let mut x3 = x2;
            add_in_place(&mut x3, &f);
            let x3 = self.norm(&x3, &layer.ffn_norm);
            x = self.adapt(x3, layer.adapters.as_ref().map(|a| &a.after_ffn), rows);
        }
        for s in states.iter_mut() {
            s.len += 1;
        }
        let mut z = kernels::matmul_nt(&x, tok.data(), rows, d, tok.rows());
        kernels::add_bias(&mut z, self.mat(self.embeddings.output_bias));
        z.chunks_mut(tok.rows()).for_each(kernels::log_softmax_in_place);
        Ok(z)
    }
}
