//! Corpus BLEU with the `c.mixed+#.1+s.exp+tok.13a` settings of SacreBLEU 1.4.9.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::tokenize_13a;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuResult {
    /// In `[0, 100]`.
    pub score: f64,
    /// Per-order precisions in percent.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// SacreBLEU's guard against `ln 0`.
fn safe_ln(x: f64) -> f64 {
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

/// BLEU from corpus-level match and total counts.
pub fn bleu_from_counts(
    correct: [usize; MAX_ORDER],
    total: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
) -> BleuResult {
    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len < ref_len {
        if hyp_len > 0 {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    let mean_log = precisions.iter().map(|&p| safe_ln(p)).sum::<f64>() / MAX_ORDER as f64;
    BleuResult {
        score: brevity_penalty * mean_log.exp(),
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}

/// Detokenized, case-sensitive corpus BLEU against one reference per line.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuResult> {
    if hypotheses.len() != references.len() {
        return Err(Error::Config(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyData("no hypotheses to score".into()));
    }
    let mut correct = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = tokenize_13a(h.as_ref());
        let r = tokenize_13a(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, &c) in &hc {
                correct[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(bleu_from_counts(correct, total, hyp_len, ref_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_100() {
        let s = ["the cat sat on the mat .", "a b c d e"];
        assert!((bleu(&s, &s).unwrap().score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn smoothed_example() {
        let r = bleu(&["the cat sat on the mat"], &["the cat is on the mat"]).unwrap();
        assert!((r.score - 37.99178428257963).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn brevity_example() {
        let r = bleu(&["the cat on the mat"], &["the cat is sitting on the mat"]).unwrap();
        assert!((r.score - 33.51600230178196).abs() < 1e-9);
        assert_eq!((r.hyp_len, r.ref_len), (5, 7));
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let r = bleu(&[""], &["a b c"]).unwrap();
        assert_eq!(r.brevity_penalty, 0.0);
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn errors() {
        assert!(bleu(&["a"], &["a", "b"]).is_err());
        assert!(bleu::<&str, &str>(&[], &[]).is_err());
    }
}
