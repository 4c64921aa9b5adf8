//! Synthetic HMR/LMR language pairs with a known word-level cipher.
//!
//! HMR text comes from a seeded sparse bigram process over pronounceable
//! words. LMR text is a separate sample from the same process, passed
//! through a bijective cipher: either a substitution by other words of the
//! same alphabet, or a letter-by-letter transliteration into Cyrillic. The
//! HMR side depends only on the seed and sizes, not on the cipher.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Cipher {
    WordSubstitution,
    Transliteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPairSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub hmr_n: usize,
    pub lmr_n: usize,
    pub dev_n: usize,
    /// Extra held-out pairs for supervised runs.
    pub parallel_n: usize,
    /// Successors per word in the bigram table.
    pub branching: usize,
    pub cipher: Cipher,
    pub seed: u64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        SyntheticPairSpec {
            vocab_size: 100,
            min_len: 3,
            max_len: 12,
            hmr_n: 5000,
            lmr_n: 1000,
            dev_n: 200,
            parallel_n: 200,
            branching: 6,
            cipher: Cipher::WordSubstitution,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub hmr: Vec<String>,
    pub lmr: Vec<String>,
    pub dev_hmr: Vec<String>,
    pub dev_lmr: Vec<String>,
    pub parallel_hmr: Vec<String>,
    pub parallel_lmr: Vec<String>,
    /// HMR word to LMR word.
    pub cipher: BTreeMap<String, String>,
}

const CONSONANTS: [char; 14] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const CYR_CONSONANTS: [char; 14] = ['б', 'д', 'ф', 'г', 'к', 'л', 'м', 'н', 'п', 'р', 'с', 'т', 'в', 'з'];
const CYR_VOWELS: [char; 5] = ['а', 'э', 'и', 'о', 'у'];

fn transliterate(word: &str) -> String {
    word.chars()
        .map(|c| {
            if let Some(i) = CONSONANTS.iter().position(|&x| x == c) {
                CYR_CONSONANTS[i]
            } else {
                CYR_VOWELS[VOWELS.iter().position(|&x| x == c).expect("word uses the Latin alphabet")]
            }
        })
        .collect()
}

/// `n` distinct consonant-vowel words of one to three syllables.
fn pronounceable_words(n: usize, rng: &mut Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = 1 + rng.below(3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.below(CONSONANTS.len())]);
            w.push(VOWELS[rng.below(VOWELS.len())]);
        }
        if syllables == 1 {
            w.push(CONSONANTS[rng.below(CONSONANTS.len())]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Zipfian weights `1/r` over ranks `1..=n`, as a cumulative table.
fn zipf_cdf(n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (1..=n)
        .map(|r| {
            acc += 1.0 / r as f64;
            acc
        })
        .collect();
    cdf.iter_mut().for_each(|c| *c /= acc);
    cdf
}

fn draw(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

struct Bigram {
    start: Vec<f64>,
    successors: Vec<Vec<usize>>,
    succ_cdf: Vec<f64>,
}

impl Bigram {
    fn new(vocab: usize, branching: usize, rng: &mut Rng) -> Self {
        let b = branching.min(vocab);
        let successors = (0..vocab)
            .map(|_| rng.permutation(vocab).into_iter().take(b).collect())
            .collect();
        Bigram {
            start: zipf_cdf(vocab),
            successors,
            succ_cdf: zipf_cdf(b),
        }
    }

    fn sentence(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut s = vec![draw(&self.start, rng)];
        while s.len() < len {
            let prev = *s.last().expect("nonempty");
            s.push(self.successors[prev][draw(&self.succ_cdf, rng)]);
        }
        s
    }
}

pub fn gen_synthetic(spec: &SyntheticPairSpec) -> Result<SyntheticPair> {
    if spec.vocab_size < 10 {
        return Err(Error::Config(format!("vocab_size must be at least 10, got {}", spec.vocab_size)));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "sentence length range {}..={} is invalid",
            spec.min_len, spec.max_len
        )));
    }
    if spec.branching == 0 {
        return Err(Error::Config("branching must be positive".into()));
    }
    let mut rng = Rng::new(spec.seed, Stream::Synthetic);
    let words = pronounceable_words(2 * spec.vocab_size, &mut rng);
    let (hmr_words, sub_words) = words.split_at(spec.vocab_size);
    let lmr_words: Vec<String> = match spec.cipher {
        Cipher::WordSubstitution => sub_words.to_vec(),
        Cipher::Transliteration => hmr_words.iter().map(|w| transliterate(w)).collect(),
    };
    let bigram = Bigram::new(spec.vocab_size, spec.branching, &mut rng);

    let total = spec.hmr_n + spec.lmr_n + spec.dev_n + spec.parallel_n;
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > 100 * total + 10_000 {
            return Err(Error::Config(format!(
                "could not draw {total} distinct sentences; raise vocab_size, branching or max_len"
            )));
        }
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let s = bigram.sentence(len, &mut rng);
        if seen.insert(s.clone()) {
            sentences.push(s);
        }
    }
    let render = |s: &[usize], table: &[String]| s.iter().map(|&w| table[w].as_str()).collect::<Vec<_>>().join(" ");
    let hmr_side = |range: std::ops::Range<usize>| -> Vec<String> {
        sentences[range].iter().map(|s| render(s, hmr_words)).collect()
    };
    let lmr_side = |range: std::ops::Range<usize>| -> Vec<String> {
        sentences[range].iter().map(|s| render(s, &lmr_words)).collect()
    };
    let a = spec.hmr_n;
    let b = a + spec.lmr_n;
    let c = b + spec.dev_n;
    Ok(SyntheticPair {
        hmr: hmr_side(0..a),
        lmr: lmr_side(a..b),
        dev_hmr: hmr_side(b..c),
        dev_lmr: lmr_side(b..c),
        parallel_hmr: hmr_side(c..total),
        parallel_lmr: lmr_side(c..total),
        cipher: hmr_words.iter().cloned().zip(lmr_words.iter().cloned()).collect(),
    })
}

impl SyntheticPair {
    /// Writes `hmr.txt`, `lmr.txt`, `dev.hmr`, `dev.lmr`, `parallel.hmr`,
    /// `parallel.lmr` and `cipher.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Write { path, source }
        };
        std::fs::create_dir_all(dir).map_err(err(dir))?;
        let cipher: Vec<String> = self.cipher.iter().map(|(h, l)| format!("{h}\t{l}")).collect();
        let files: [(&str, &[String]); 7] = [
            ("hmr.txt", &self.hmr),
            ("lmr.txt", &self.lmr),
            ("dev.hmr", &self.dev_hmr),
            ("dev.lmr", &self.dev_lmr),
            ("parallel.hmr", &self.parallel_hmr),
            ("parallel.lmr", &self.parallel_lmr),
            ("cipher.tsv", &cipher),
        ];
        for (name, lines) in files {
            let path = dir.join(name);
            let mut text = lines.join("\n");
            text.push('\n');
            std::fs::write(&path, text).map_err(err(&path))?;
        }
        Ok(())
    }
}
