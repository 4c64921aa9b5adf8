//! Greedy and beam decoding, detokenization, BLEU and masked perplexity.

mod bleu;

use crate::bpe::{BOS, CONTINUATION, EOS, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Rng, Scalar, Stream};
use crate::transformer::{mask_batch, DecoderState, EncodedSource, LmModel, MaskConfig, NmtModel, TokenBatch};

pub use bleu::{bleu, bleu_from_counts, BleuResult, MAX_ORDER};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending in `</s>` when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the closing `</s>`.
    pub fn output(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    /// `log_prob / len^length_penalty`.
    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }
}

/// A left-to-right next-token distribution.
pub trait StepScorer {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    /// Feeds `tokens[r]` to `states[r]` and returns each row's next-token
    /// log-probabilities.
    fn step(&self, states: &mut [Self::State], tokens: &[u32]) -> Result<Vec<Vec<f64>>>;

    /// Largest number of tokens that can be fed.
    fn max_steps(&self) -> usize {
        usize::MAX
    }
}

/// One source sentence under an NMT model.
pub struct NmtScorer<'m, F: Scalar> {
    pub model: &'m NmtModel<F>,
    pub source: &'m EncodedSource<F>,
    pub tgt_lang: usize,
}

impl<F: Scalar> StepScorer for NmtScorer<'_, F> {
    type State = DecoderState<F>;

    fn initial_state(&self) -> Self::State {
        self.model.start_state()
    }

    fn step(&self, states: &mut [Self::State], tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let sources = vec![self.source; tokens.len()];
        let flat = self.model.decode_step(&sources, states, tokens, self.tgt_lang)?;
        let v = self.model.vocab.len();
        Ok(flat.chunks(v).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
    }

    fn max_steps(&self) -> usize {
        self.model.config.max_positions
    }
}

/// First index of the maximum; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Beam search ranking candidates by raw log-probability, ties broken by
/// the lexicographically smaller token sequence. Candidates ending in `</s>`
/// that make the top `beam` are finished; the rest stay live. The result is
/// the best finished hypothesis by `log_prob / len^length_penalty`, or the
/// best live one if none finished.
pub fn beam_search_with<S: StepScorer>(
    scorer: &S,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let max_len = max_len.min(scorer.max_steps());
    let mut live: Vec<(Hypothesis, S::State)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        scorer.initial_state(),
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let feed: Vec<u32> = live.iter().map(|(h, _)| *h.tokens.last().unwrap_or(&BOS)).collect();
        let mut states: Vec<S::State> = live.iter().map(|(_, s)| s.clone()).collect();
        let scores = scorer.step(&mut states, &feed)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (i, row) in scores.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                cands.push((live[i].0.log_prob + lp, i, t as u32));
            }
        }
        let cmp_seq = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            let (ta, tb) = (&live[a.1].0.tokens, &live[b.1].0.tokens);
            ta.iter().chain([&a.2]).cmp(tb.iter().chain([&b.2]))
        };
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| cmp_seq(a, b)));
        let mut next = Vec::with_capacity(beam);
        for &(lp, i, t) in cands.iter().take(beam) {
            let mut tokens = live[i].0.tokens.clone();
            tokens.push(t);
            let done = t == EOS;
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next.push((h, states[i].clone()));
            }
        }
        live = next;
    }
    let by_score = |a: &Hypothesis, b: &Hypothesis| {
        a.normalized_score(length_penalty)
            .total_cmp(&b.normalized_score(length_penalty))
            .then_with(|| b.tokens.cmp(&a.tokens))
    };
    let pool = if finished.is_empty() {
        live.into_iter().map(|(h, _)| h).collect()
    } else {
        finished
    };
    pool.into_iter()
        .max_by(by_score)
        .ok_or_else(|| Error::Model("beam search produced no hypothesis".into()))
}

/// Beam search for one source sentence.
pub fn beam_search<F: Scalar>(
    model: &NmtModel<F>,
    src: &[u32],
    src_lang: usize,
    tgt_lang: usize,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let enc = model.encode_sources(&[src], src_lang)?;
    let scorer = NmtScorer {
        model,
        source: &enc[0],
        tgt_lang,
    };
    beam_search_with(&scorer, beam, max_len, length_penalty)
}

/// Greedy decoding of one sentence.
pub fn greedy_decode<F: Scalar>(
    model: &NmtModel<F>,
    src: &[u32],
    src_lang: usize,
    tgt_lang: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    Ok(greedy_decode_batch(model, &[src], src_lang, tgt_lang, |_| max_len)?.remove(0))
}

/// Greedy decoding of many sentences in lockstep; `max_len(i)` caps
/// sentence `i`. Rows do not interact, so each result equals a lone
/// [`greedy_decode`].
pub fn greedy_decode_batch<F: Scalar, S: AsRef<[u32]>>(
    model: &NmtModel<F>,
    sources: &[S],
    src_lang: usize,
    tgt_lang: usize,
    max_len: impl Fn(usize) -> usize,
) -> Result<Vec<Hypothesis>> {
    let enc = model.encode_sources(sources, src_lang)?;
    let limit: Vec<usize> = (0..sources.len())
        .map(|i| max_len(i).min(model.config.max_positions))
        .collect();
    let mut hyps: Vec<Hypothesis> = (0..sources.len())
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..sources.len()).filter(|&i| limit[i] > 0).collect();
    let mut states: Vec<DecoderState<F>> = active.iter().map(|_| model.start_state()).collect();
    let v = model.vocab.len();
    while !active.is_empty() {
        let srcs: Vec<&EncodedSource<F>> = active.iter().map(|&i| &enc[i]).collect();
        let feed: Vec<u32> = active.iter().map(|&i| *hyps[i].tokens.last().unwrap_or(&BOS)).collect();
        let logp = model.decode_step(&srcs, &mut states, &feed, tgt_lang)?;
        let mut keep = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let row: Vec<f64> = logp[r * v..(r + 1) * v].iter().map(|x| x.as_f64()).collect();
            let t = argmax(&row);
            let h = &mut hyps[i];
            h.tokens.push(t as u32);
            h.log_prob += row[t];
            if t as u32 == EOS {
                h.finished = true;
            }
            keep.push(!h.finished && h.tokens.len() < limit[i]);
        }
        let mut k = keep.iter();
        states.retain(|_| *k.next().expect("one flag per row"));
        let mut k = keep.iter();
        active.retain(|_| *k.next().expect("one flag per row"));
    }
    Ok(hyps)
}

/// Undoes `@@` segmentation and drops special tokens.
pub fn detokenize<S: AsRef<str>>(subwords: &[S]) -> String {
    let mut out = String::new();
    let mut glued = false;
    for s in subwords {
        let s = s.as_ref();
        if SPECIAL_TOKENS.contains(&s) {
            continue;
        }
        if !out.is_empty() && !glued {
            out.push(' ');
        }
        match s.strip_suffix(CONTINUATION) {
            Some(piece) => {
                out.push_str(piece);
                glued = true;
            }
            None => {
                out.push_str(s);
                glued = false;
            }
        }
    }
    out
}

/// `exp` of the mean NLL over masked positions, with masks drawn from
/// `seed` so repeated evaluations agree exactly. Sentences are framed
/// `<s> … </s>` token rows.
pub fn masked_perplexity<F: Scalar>(
    model: &LmModel<F>,
    sentences: &[Vec<u32>],
    language: usize,
    seed: u64,
    mask: &MaskConfig,
    batch_size: usize,
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyData("perplexity needs a nonempty dev set".into()));
    }
    let mut rng = Rng::new(seed, Stream::Eval);
    let (mut nll, mut count) = (0.0f64, 0usize);
    for chunk in sentences.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_sequences(chunk)?;
        let (masked, targets) = mask_batch(&batch, model.vocab.len(), mask, &mut rng);
        let n = targets.iter().flatten().count();
        if n == 0 {
            continue;
        }
        let mut g = Graph::eval(&model.params);
        let loss = model.mlm_loss(&mut g, &masked, &targets, language)?;
        nll += g.value(loss).data()[0].as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyData("no dev position was masked".into()));
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probs depend only on the previous token.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        type State = ();

        fn initial_state(&self) {}

        fn step(&self, _: &mut [()], tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
            Ok(tokens.iter().map(|&t| self.0[t as usize].clone()).collect())
        }
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(detokenize(&["n@@", "e@@", "w@@", "est"]), "newest");
        assert_eq!(detokenize(&["hello"]), "hello");
        assert_eq!(detokenize(&["<s>", "a", "</s>"]), "a");
        assert_eq!(detokenize(&["a@@", "b", "c"]), "ab c");
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
    }

    #[test]
    fn beam_one_is_greedy_on_table() {
        // Greedy takes the locally best first token and ends worse.
        let ln = f64::ln;
        let mut t = vec![vec![f64::NEG_INFINITY; 6]; 6];
        t[BOS as usize] = vec![-9.0, -9.0, -9.0, -9.0, ln(0.4), ln(0.35)];
        t[4] = vec![-9.0, -9.0, -9.0, ln(0.3), ln(0.35), ln(0.35)];
        t[5] = vec![-9.0, -9.0, -9.0, ln(0.95), -9.0, -9.0];
        let g = beam_search_with(&Table(t.clone()), 1, 2, 0.0).unwrap();
        assert_eq!(g.tokens, [4, 4]);
        let b = beam_search_with(&Table(t), 3, 2, 0.0).unwrap();
        assert_eq!(b.tokens, [5, EOS]);
        assert!(b.log_prob > g.log_prob);
    }
}
