//! Temperature-based multilingual sampling and the deterministic batch stream.

use crate::corpus::LanguageTag;
use crate::error::{Error, Result};
use crate::numeric::{Rng, Stream};

/// `q_i = p_i^α / Σ_j p_j^α` with `p_i = n_i / Σ_j n_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    pub alpha: f64,
    pub probabilities: Vec<(LanguageTag, f64)>,
}

impl SamplingDistribution {
    pub fn probability(&self, language: &LanguageTag) -> Option<f64> {
        self.probabilities
            .iter()
            .find(|(l, _)| l == language)
            .map(|(_, p)| *p)
    }

    /// Index of the language chosen by a uniform draw `u` in `[0, 1)`.
    fn choose(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, (_, p)) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probabilities.len() - 1
    }
}

pub fn make_sampler(counts: &[(LanguageTag, usize)], alpha: f64) -> Result<SamplingDistribution> {
    if counts.is_empty() {
        return Err(Error::Config("sampling needs at least one language".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if let Some((l, _)) = counts.iter().find(|(_, n)| *n == 0) {
        return Err(Error::EmptyData(format!("language {} has no sentences", l.id)));
    }
    for (i, (a, _)) in counts.iter().enumerate() {
        if counts[..i].iter().any(|(b, _)| b == a) {
            return Err(Error::Config(format!("language {} listed twice", a.id)));
        }
    }
    let total: f64 = counts.iter().map(|(_, n)| *n as f64).sum();
    let weights: Vec<f64> = counts
        .iter()
        .map(|(_, n)| (*n as f64 / total).powf(alpha))
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(SamplingDistribution {
        alpha,
        probabilities: counts
            .iter()
            .zip(weights)
            .map(|((l, _), w)| (l.clone(), w / z))
            .collect(),
    })
}

/// One batch drawn from a single language.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<'a, T> {
    pub language: LanguageTag,
    pub items: Vec<&'a T>,
}

/// Cycles through a corpus in a fresh seeded permutation each epoch.
#[derive(Debug, Clone)]
pub struct EpochCycler {
    len: usize,
    seed: u64,
    tag: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochCycler {
    pub fn new(len: usize, seed: u64, tag: u64) -> Self {
        let mut c = EpochCycler {
            len,
            seed,
            tag,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = Rng::with_tag(self.seed, Stream::Shuffle, (self.tag << 32) ^ self.epoch);
        self.order = rng.permutation(self.len);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

/// Infinite, seeded stream of single-language batches.
pub struct BatchStream<'a, T> {
    corpora: Vec<(LanguageTag, &'a [T])>,
    dist: SamplingDistribution,
    cyclers: Vec<EpochCycler>,
    batch_size: usize,
    rng: Rng,
}

/// Builds the batch stream over `corpora`. Languages are picked per `dist`;
/// within a language sentences cycle through a seeded shuffle.
pub fn sample_batches<'a, T>(
    corpora: Vec<(LanguageTag, &'a [T])>,
    dist: &SamplingDistribution,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream<'a, T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut ordered = Vec::with_capacity(dist.probabilities.len());
    let mut cyclers = Vec::with_capacity(dist.probabilities.len());
    for (i, (lang, _)) in dist.probabilities.iter().enumerate() {
        let Some((_, data)) = corpora.iter().find(|(l, _)| l == lang) else {
            return Err(Error::UnknownLanguage(lang.id.clone()));
        };
        if data.is_empty() {
            return Err(Error::EmptyData(format!("corpus for {} is empty", lang.id)));
        }
        cyclers.push(EpochCycler::new(data.len(), seed, i as u64 + 1));
        ordered.push((lang.clone(), *data));
    }
    Ok(BatchStream {
        corpora: ordered,
        dist: dist.clone(),
        cyclers,
        batch_size,
        rng: Rng::new(seed, Stream::Sampling),
    })
}

impl<'a, T> Iterator for BatchStream<'a, T> {
    type Item = Batch<'a, T>;

    fn next(&mut self) -> Option<Self::Item> {
        let li = self.dist.choose(self.rng.uniform());
        let (lang, data) = &self.corpora[li];
        let items = self.cyclers[li]
            .take(self.batch_size)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        Some(Batch {
            language: lang.clone(),
            items,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Role;
    use proptest::prelude::*;

    fn tags() -> (LanguageTag, LanguageTag) {
        (LanguageTag::new("a", Role::Hmr), LanguageTag::new("b", Role::Lmr))
    }

    #[test]
    fn alpha_extremes_and_half() {
        let (a, b) = tags();
        let counts = [(a.clone(), 75), (b.clone(), 25)];
        let d1 = make_sampler(&counts, 1.0).unwrap();
        assert!((d1.probability(&a).unwrap() - 0.75).abs() < 1e-12);
        let d0 = make_sampler(&counts, 0.0).unwrap();
        assert!((d0.probability(&b).unwrap() - 0.5).abs() < 1e-12);
        let dh = make_sampler(&counts, 0.5).unwrap();
        assert!((dh.probability(&a).unwrap() - 0.6340).abs() < 1e-4);
        assert!((dh.probability(&b).unwrap() - 0.3660).abs() < 1e-4);
    }

    #[test]
    fn zero_count_rejected() {
        let (a, b) = tags();
        assert!(matches!(
            make_sampler(&[(a, 3), (b, 0)], 0.5),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn single_language_stream() {
        let (a, _) = tags();
        let data = [1, 2, 3];
        let d = make_sampler(&[(a.clone(), 3)], 0.5).unwrap();
        let s = sample_batches(vec![(a.clone(), &data[..])], &d, 2, 9).unwrap();
        for batch in s.take(50) {
            assert_eq!(batch.language, a);
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        let (a, _) = tags();
        let data = [1];
        let d = make_sampler(&[(a.clone(), 1)], 0.5).unwrap();
        assert!(matches!(
            sample_batches(vec![(a, &data[..])], &d, 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn replay_identical() {
        let (a, b) = tags();
        let xs: Vec<u32> = (0..17).collect();
        let ys: Vec<u32> = (100..105).collect();
        let d = make_sampler(&[(a.clone(), 17), (b.clone(), 5)], 0.5).unwrap();
        let run = || {
            sample_batches(vec![(a.clone(), &xs[..]), (b.clone(), &ys[..])], &d, 3, 42)
                .unwrap()
                .take(200)
                .map(|bt| (bt.language.id.clone(), bt.items.into_iter().copied().collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn epoch_covers_every_sentence() {
        let mut c = EpochCycler::new(10, 5, 1);
        let mut first: Vec<usize> = c.take(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        c.next_index();
        assert_eq!(c.epoch(), 1);
    }

    proptest! {
        #[test]
        fn sampler_sums_to_one(counts in prop::collection::vec(1usize..100_000, 1..6), alpha in 0.0f64..=1.0) {
            let tagged: Vec<_> = counts
                .iter()
                .enumerate()
                .map(|(i, &n)| (LanguageTag::new(format!("l{i}"), Role::Lmr), n))
                .collect();
            let d = make_sampler(&tagged, alpha).unwrap();
            let s: f64 = d.probabilities.iter().map(|(_, p)| p).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
