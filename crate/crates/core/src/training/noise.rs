use crate::bpe::MASK;
use crate::numeric::Rng;

use super::NoiseConfig;

/// Denoising-autoencoder corruption of an unframed sentence: local shuffle
/// (sort by `i + U[0, k]`), word drop keeping at least one token, then
/// blanking to `<mask>`.
pub fn dae_noise(tokens: &[u32], noise: &NoiseConfig, rng: &mut Rng) -> Vec<u32> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let k = noise.shuffle_k as f64;
    let mut keyed: Vec<(f64, u32)> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (i as f64 + k * rng.uniform(), t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let shuffled: Vec<u32> = keyed.into_iter().map(|(_, t)| t).collect();

    let keep: Vec<bool> = shuffled.iter().map(|_| !rng.bernoulli(noise.p_drop)).collect();
    let mut out: Vec<u32> = if keep.iter().any(|&k| k) {
        shuffled.iter().zip(&keep).filter(|(_, &k)| k).map(|(&t, _)| t).collect()
    } else {
        vec![shuffled[rng.below(shuffled.len())]]
    };
    for t in &mut out {
        if rng.bernoulli(noise.p_blank) {
            *t = MASK;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Stream;

    fn cfg(k: usize, d: f64, b: f64) -> NoiseConfig {
        NoiseConfig {
            shuffle_k: k,
            p_drop: d,
            p_blank: b,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = Rng::new(1, Stream::Noise);
        let s: Vec<u32> = (5..30).collect();
        assert_eq!(dae_noise(&s, &cfg(0, 0.0, 0.0), &mut rng), s);
    }

    #[test]
    fn full_blank_keeps_length() {
        let mut rng = Rng::new(1, Stream::Noise);
        let s: Vec<u32> = (5..30).collect();
        let out = dae_noise(&s, &cfg(3, 0.0, 1.0), &mut rng);
        assert_eq!(out, vec![MASK; s.len()]);
    }

    #[test]
    fn never_empty() {
        let mut rng = Rng::new(2, Stream::Noise);
        for _ in 0..200 {
            assert_eq!(dae_noise(&[9, 10], &cfg(3, 0.99, 0.0), &mut rng).len().min(1), 1);
        }
    }

    #[test]
    fn displacement_bounded_by_k() {
        let mut rng = Rng::new(3, Stream::Noise);
        for k in 0..6 {
            for _ in 0..500 {
                let s: Vec<u32> = (0..40).collect();
                let out = dae_noise(&s, &cfg(k, 0.0, 0.0), &mut rng);
                for (new, &old) in out.iter().enumerate() {
                    assert!((new as i64 - old as i64).unsigned_abs() as usize <= k);
                }
            }
        }
    }

    #[test]
    fn kept_fraction() {
        let mut rng = Rng::new(4, Stream::Noise);
        let s: Vec<u32> = (5..105).collect();
        let kept: usize = (0..1000).map(|_| dae_noise(&s, &cfg(3, 0.1, 0.0), &mut rng).len()).sum();
        let frac = kept as f64 / 100_000.0;
        assert!((frac - 0.9).abs() < 0.01, "{frac}");
    }
}
