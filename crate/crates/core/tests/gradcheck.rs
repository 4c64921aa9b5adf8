//! Analytic gradients against central finite differences in f64.

use std::collections::BTreeMap;

use relm_core::bpe::{Vocabulary, BOS, EOS};
use relm_core::numeric::{Graph, NodeId, ParamStore, Rng, Stream};
use relm_core::transformer::{build_lm, init_nmt_from_lm, LmModel, ModelConfig, NmtModel, TokenBatch};
use relm_core::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers_lm: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_positions: 12,
        vocab_size: vocab.len(),
        n_languages: 2,
        adapter_dim: Some(4),
        ..Default::default()
    }
}

fn vocab() -> Vocabulary {
    let counts: BTreeMap<String, u64> = (0..9).map(|i| (format!("t{i}"), 1)).collect();
    Vocabulary::from_counts(&counts)
}

/// Moves every weight off its initial value so zero-initialized adapters,
/// unit gains and zero biases all carry gradient.
fn jitter(params: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::new(seed, Stream::Init);
    for p in params.iter_mut() {
        for x in p.value.data_mut() {
            *x += rng.normal(0.0, 0.3);
        }
    }
}

fn loss_value(params: &ParamStore<f64>, f: &dyn Fn(&mut Graph<f64>) -> Result<NodeId>) -> f64 {
    let mut g = Graph::train_no_dropout(params);
    let l = f(&mut g).unwrap();
    g.value(l).data()[0]
}

/// Relative error per tensor, `‖a − n‖ / max(‖a‖, ‖n‖)`, for every parameter.
fn check(params: &mut ParamStore<f64>, f: &dyn Fn(&mut Graph<f64>) -> Result<NodeId>) -> Vec<(String, f64)> {
    let analytic = {
        let mut g = Graph::train_no_dropout(params);
        let l = f(&mut g).unwrap();
        g.backward(l).unwrap()
    };
    let mut by_id: BTreeMap<usize, Vec<f64>> = analytic.into_iter().map(|(id, t)| (id.index(), t.into_data())).collect();
    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    let mut out = Vec::new();
    for (id, name, n) in ids {
        let a = by_id.remove(&id.index()).unwrap_or_else(|| vec![0.0; n]);
        let mut num = vec![0.0; n];
        for i in 0..n {
            let x = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = x + H;
            let up = loss_value(params, f);
            params.value_mut(id).data_mut()[i] = x - H;
            let down = loss_value(params, f);
            params.value_mut(id).data_mut()[i] = x;
            num[i] = (up - down) / (2.0 * H);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&num).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&num));
        let rel = if scale < 1e-9 { norm(&diff) } else { norm(&diff) / scale };
        out.push((name, rel));
    }
    out
}

fn assert_all(errors: &[(String, f64)]) {
    let bad: Vec<_> = errors.iter().filter(|(_, e)| !(*e < TOL)).collect();
    assert!(bad.is_empty(), "gradient mismatch: {bad:?}");
}

fn lm() -> LmModel<f64> {
    let v = vocab();
    let mut m = build_lm(config(&v), v, &mut Rng::new(1, Stream::Init)).unwrap();
    jitter(&mut m.params, 2);
    m
}

#[test]
fn lm_gradients_match_finite_differences() {
    let mut model = lm();
    let batch = TokenBatch::from_sequences(&[vec![BOS, 5, 4, 7, 9, EOS], vec![BOS, 11, 12, EOS]]).unwrap();
    let targets = vec![None, Some(6), Some(8), None, Some(9), None, None, Some(10), None, None, None, None];
    let params = std::mem::take(&mut model.params);
    let mut params = params;
    let errors = {
        let m = &model;
        check(&mut params, &|g| m.mlm_loss(g, &batch, &targets, 1))
    };
    assert_eq!(errors.len(), params.len());
    assert_all(&errors);
}

#[test]
fn nmt_gradients_match_finite_differences() {
    let lm = lm();
    let mut model: NmtModel<f64> = init_nmt_from_lm(&lm, &mut Rng::new(3, Stream::Init)).unwrap();
    jitter(&mut model.params, 4);
    let src = TokenBatch::from_sequences(&[vec![BOS, 5, 6, 7, EOS], vec![BOS, 8, EOS]]).unwrap();
    let tgt = TokenBatch::from_sequences(&[vec![BOS, 9, 10, EOS], vec![BOS, 11, 12, 13, EOS]]).unwrap();
    let mut params = std::mem::take(&mut model.params);
    let errors = {
        let m = &model;
        check(&mut params, &|g| m.loss(g, &src, &tgt, 1, 0, 0.1))
    };
    assert_eq!(errors.len(), params.len());
    assert_all(&errors);
}
