//! BPE learning and application, joint BPE over an α-sampled mix of both
//! languages, and vocabulary extension.
//!
//! Two merge tables matter: one learned on HMR text only (used for HMR data
//! throughout) and one learned jointly (used to split LMR data). Without the
//! joint table an LMR language written in another script falls apart into
//! single characters; [`segmentation_stats`] measures exactly that.

mod merges;
mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::corpus::{make_sampler, EpochCycler, LanguageTag, TokenKind, TokenizedCorpus};
use crate::error::{Error, Result};
use crate::parallel;

pub use merges::{apply_bpe, learn_bpe, MergeTable, CONTINUATION, END_OF_WORD};
pub use vocab::{
    extend_vocabulary, ExtensionReport, Segment, Vocabulary, BOS, EOS, MASK, NUM_SPECIAL, PAD,
    SPECIAL_TOKENS, UNK,
};

/// Word counts over a word-level corpus.
pub fn word_frequencies<'a, I>(sentences: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a Vec<String>>,
{
    let mut freqs = BTreeMap::new();
    for s in sentences {
        for w in s {
            *freqs.entry(w.clone()).or_insert(0) += 1;
        }
    }
    freqs
}

/// Segments a word-level corpus; every distinct word is split once.
pub fn apply_bpe_corpus(merges: &MergeTable, corpus: &TokenizedCorpus) -> TokenizedCorpus {
    let segmenter = Segmenter::new(merges, corpus.sentences.iter());
    TokenizedCorpus {
        language: corpus.language.clone(),
        sentences: corpus
            .sentences
            .iter()
            .map(|s| segmenter.segment_sentence(s))
            .collect(),
        token_kind: TokenKind::Subword,
    }
}

/// Memoized word segmentation for a fixed word set.
pub struct Segmenter<'m> {
    merges: &'m MergeTable,
    cache: HashMap<String, Vec<String>>,
}

impl<'m> Segmenter<'m> {
    pub fn new<'a, I>(merges: &'m MergeTable, sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        let mut distinct: Vec<&str> = Vec::new();
        let mut seen = HashSet::new();
        for s in sentences {
            for w in s {
                if seen.insert(w.as_str()) {
                    distinct.push(w.as_str());
                }
            }
        }
        let pieces = parallel::map(&distinct, |w| apply_bpe(merges, w));
        Segmenter {
            merges,
            cache: distinct.into_iter().map(str::to_string).zip(pieces).collect(),
        }
    }

    pub fn segment_word(&self, word: &str) -> Vec<String> {
        match self.cache.get(word) {
            Some(p) => p.clone(),
            None => apply_bpe(self.merges, word),
        }
    }

    pub fn segment_sentence(&self, words: &[String]) -> Vec<String> {
        words.iter().flat_map(|w| self.segment_word(w)).collect()
    }
}

/// Draws a sentence multiset whose language proportions follow the
/// α-distribution. Per-language quotas are fixed by largest remainder and
/// filled by a seeded without-replacement cycle through each corpus.
pub fn sample_joint_sentences(
    corpora: &[TokenizedCorpus],
    alpha: f64,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<Vec<&Vec<String>>> {
    if corpora.is_empty() {
        return Err(Error::Config("joint BPE needs at least one corpus".into()));
    }
    if let Some(c) = corpora.iter().find(|c| c.is_empty()) {
        return Err(Error::EmptyData(format!("corpus for {} is empty", c.language.id)));
    }
    let counts: Vec<(LanguageTag, usize)> =
        corpora.iter().map(|c| (c.language.clone(), c.len())).collect();
    let dist = make_sampler(&counts, alpha)?;
    let total = sample_size
        .unwrap_or_else(|| corpora.iter().map(|c| c.len()).min().unwrap_or(0) * corpora.len());
    let exact: Vec<f64> = dist.probabilities.iter().map(|(_, q)| q * total as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut remainders: Vec<(usize, f64)> = exact
        .iter()
        .enumerate()
        .map(|(i, x)| (i, x - x.floor()))
        .collect();
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = total - quota.iter().sum::<usize>();
    for (i, _) in remainders.into_iter().take(short) {
        quota[i] += 1;
    }
    let mut out = Vec::with_capacity(total);
    for (li, (corpus, n)) in corpora.iter().zip(quota).enumerate() {
        let mut cycler = EpochCycler::new(corpus.len(), seed, li as u64 + 1);
        out.extend(cycler.take(n).into_iter().map(|i| &corpus.sentences[i]));
    }
    Ok(out)
}

/// Learns merges on an α-sampled mix of word-level corpora.
pub fn learn_joint_bpe(
    corpora: &[TokenizedCorpus],
    alpha: f64,
    num_merges: usize,
    seed: u64,
    sample_size: Option<usize>,
) -> Result<MergeTable> {
    let sample = sample_joint_sentences(corpora, alpha, sample_size, seed)?;
    Ok(learn_bpe(&word_frequencies(sample), num_merges))
}

/// Vocabulary of the subwords `merges` produces on `corpus`.
pub fn build_vocabulary(corpus: &TokenizedCorpus, merges: &MergeTable) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyData(format!("corpus for {} is empty", corpus.language.id)));
    }
    let seg = Segmenter::new(merges, corpus.sentences.iter());
    let mut counts = BTreeMap::new();
    for s in &corpus.sentences {
        for w in s {
            for piece in seg.segment_word(w) {
                *counts.entry(piece).or_insert(0) += 1;
            }
        }
    }
    Ok(Vocabulary::from_counts(&counts))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SegmentationStats {
    /// Mean subwords per whitespace word.
    pub fertility: f64,
    /// Fraction of words split into single characters.
    pub char_split_rate: f64,
    pub token_count: usize,
}

pub fn segmentation_stats(corpus: &TokenizedCorpus, merges: &MergeTable) -> Result<SegmentationStats> {
    let seg = Segmenter::new(merges, corpus.sentences.iter());
    let (mut words, mut tokens, mut char_split) = (0usize, 0usize, 0usize);
    for s in &corpus.sentences {
        for w in s {
            let n = seg.segment_word(w).len();
            words += 1;
            tokens += n;
            if n == w.chars().count() {
                char_split += 1;
            }
        }
    }
    if words == 0 {
        return Err(Error::EmptyData(format!("corpus for {} has no words", corpus.language.id)));
    }
    Ok(SegmentationStats {
        fertility: tokens as f64 / words as f64,
        char_split_rate: char_split as f64 / words as f64,
        token_count: tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Role;

    fn corpus(lang: &str, lines: &[&str]) -> TokenizedCorpus {
        TokenizedCorpus {
            language: LanguageTag::new(lang, if lang == "hmr" { Role::Hmr } else { Role::Lmr }),
            sentences: lines
                .iter()
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect(),
            token_kind: TokenKind::Word,
        }
    }

    #[test]
    fn vocabulary_of_single_word() {
        let v = build_vocabulary(&corpus("hmr", &["ab"]), &MergeTable::new()).unwrap();
        assert_eq!(v.get("a@@"), Some(5));
        assert_eq!(v.get("b"), Some(6));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn vocabulary_bound_without_merges() {
        let c = corpus("hmr", &["abc cab bca", "aa cc"]);
        let v = build_vocabulary(&c, &MergeTable::new()).unwrap();
        assert!(v.len() <= 5 + 2 * 3);
    }

    #[test]
    fn duplicated_corpus_gives_same_vocabulary() {
        let lines = ["the cat sat", "a dog ran far", "the dog"];
        let doubled: Vec<&str> = lines.iter().flat_map(|l| [*l, *l]).collect();
        let m = learn_bpe(&word_frequencies(corpus("hmr", &lines).sentences.iter()), 5);
        let a = build_vocabulary(&corpus("hmr", &lines), &m).unwrap();
        let b = build_vocabulary(&corpus("hmr", &doubled), &m).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn joint_single_language_matches_plain() {
        let c = corpus("hmr", &["low lower newest", "widest newest low", "lowest"]);
        let plain = learn_bpe(&word_frequencies(c.sentences.iter()), 12);
        let joint = learn_joint_bpe(std::slice::from_ref(&c), 0.5, 12, 3, None).unwrap();
        assert_eq!(plain, joint);
    }

    #[test]
    fn joint_identical_corpora_match_either() {
        let a = corpus("hmr", &["low lower newest", "widest newest low", "lowest"]);
        let mut b = a.clone();
        b.language = LanguageTag::lmr();
        let plain = learn_bpe(&word_frequencies(a.sentences.iter()), 12);
        let joint = learn_joint_bpe(&[a, b], 0.5, 12, 3, None).unwrap();
        assert_eq!(plain, joint);
    }

    #[test]
    fn joint_covers_both_alphabets() {
        let a = corpus("hmr", &["abab abab abab", "abab ab"]);
        let b = corpus("lmr", &["xyxy xyxy xy", "xyxy"]);
        let joint = learn_joint_bpe(&[a, b], 0.5, 10, 1, None).unwrap();
        let letters: String = joint.merges().iter().map(|(l, r)| format!("{l}{r}")).collect();
        assert!(letters.contains('a') && letters.contains('x'));
    }

    #[test]
    fn joint_rejects_empty_corpus() {
        let a = corpus("hmr", &["ab"]);
        let b = corpus("lmr", &[]);
        assert!(matches!(learn_joint_bpe(&[a, b], 0.5, 3, 1, None), Err(Error::EmptyData(_))));
    }

    #[test]
    fn stats_extremes() {
        let c = corpus("hmr", &["hello world", "hello"]);
        let none = segmentation_stats(&c, &MergeTable::new()).unwrap();
        assert_eq!(none.char_split_rate, 1.0);
        assert!((none.fertility - 5.0).abs() < 1e-12);
        let m = learn_bpe(&word_frequencies(c.sentences.iter()), 100);
        let full = segmentation_stats(&c, &m).unwrap();
        assert_eq!(full.fertility, 1.0);
        assert_eq!(full.char_split_rate, 0.0);
    }
}
