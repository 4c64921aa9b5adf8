use std::collections::BTreeMap;

use crate::corpus::{make_sampler, sample_batches, LanguageTag, Role};
use crate::decode::masked_perplexity;
use crate::error::{Error, Result};
use crate::numeric::{AdamState, Rng, Scalar, Stream};
use crate::transformer::{mask_batch, LmModel, TokenBatch, TrainableScheme};

use super::{
    apply_update, dropout_rng, frame, gradients, BestKeeper, CheckpointClock, DataSource, EarlyStopper,
    LanguageSet, MetricsRecord, PhaseOutcome, Scheme, StopMode, TrainConfig,
};

struct MlmCorpus<'a> {
    tag: LanguageTag,
    source: DataSource,
    sentences: &'a [Vec<u32>],
}

/// Masked-LM pretraining on HMR text with a constant learning rate. Dev
/// perplexity is measured at every `checkpoint_every_sentences` crossing
/// (and once at the end); the best-dev parameters are returned.
pub fn pretrain_mlm<F: Scalar>(
    mut model: LmModel<F>,
    hmr: &[Vec<u32>],
    dev: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<PhaseOutcome<LmModel<F>>> {
    if hmr.is_empty() || dev.is_empty() {
        return Err(Error::EmptyData("pretraining needs HMR training and dev sentences".into()));
    }
    model.set_trainable(TrainableScheme::All)?;
    let corpora = vec![MlmCorpus {
        tag: LanguageTag::hmr(),
        source: DataSource::HmrMonolingual,
        sentences: hmr,
    }];
    run_mlm(model, corpora, dev, Role::Hmr, cfg, "pretrain")
}

/// Masked-LM fine-tuning of an extended model on LMR text, optionally
/// mixed with HMR text through α-sampling. Stops on LMR dev perplexity.
pub fn finetune_lm<F: Scalar>(
    mut model: LmModel<F>,
    lmr: &[Vec<u32>],
    hmr: Option<&[Vec<u32>]>,
    dev_lmr: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<PhaseOutcome<LmModel<F>>> {
    if lmr.is_empty() || dev_lmr.is_empty() {
        return Err(Error::EmptyData("fine-tuning needs LMR training and dev sentences".into()));
    }
    let rows = model.token_embedding().rows();
    if rows != model.vocab.len() || model.config.n_languages < 2 {
        return Err(Error::Vocabulary(format!(
            "model has {rows} embedding rows and {} language rows for a vocabulary of {}; apply the extension first",
            model.config.n_languages,
            model.vocab.len()
        )));
    }
    match cfg.scheme {
        Scheme::Full => model.set_trainable(TrainableScheme::All)?,
        Scheme::Adapters => {
            if !model.has_adapters() {
                return Err(Error::Config("scheme ADAPTERS needs adapters attached to the model".into()));
            }
            model.set_trainable(TrainableScheme::AdaptersAndEmbeddings)?;
        }
    }
    let mut corpora = vec![MlmCorpus {
        tag: LanguageTag::lmr(),
        source: DataSource::LmrMonolingual,
        sentences: lmr,
    }];
    match (cfg.languages, hmr) {
        (LanguageSet::LmrAndHmr, Some(h)) if !h.is_empty() => corpora.push(MlmCorpus {
            tag: LanguageTag::hmr(),
            source: DataSource::HmrMonolingual,
            sentences: h,
        }),
        (LanguageSet::LmrAndHmr, _) => {
            return Err(Error::EmptyData("languages = LMR_AND_HMR but no HMR corpus given".into()))
        }
        (LanguageSet::LmrOnly, _) => {}
    }
    run_mlm(model, corpora, dev_lmr, Role::Lmr, cfg, "finetune")
}

fn run_mlm<F: Scalar>(
    mut model: LmModel<F>,
    corpora: Vec<MlmCorpus<'_>>,
    dev: &[Vec<u32>],
    dev_role: Role,
    cfg: &TrainConfig,
    phase: &str,
) -> Result<PhaseOutcome<LmModel<F>>> {
    cfg.validate()?;
    let max_pos = model.config.max_positions;
    let framed: Vec<Vec<Vec<u32>>> = corpora
        .iter()
        .map(|c| c.sentences.iter().map(|s| frame(s, max_pos)).collect())
        .collect();
    let dev: Vec<Vec<u32>> = dev.iter().map(|s| frame(s, max_pos)).collect();
    let counts: Vec<(LanguageTag, usize)> = corpora.iter().map(|c| (c.tag.clone(), c.sentences.len())).collect();
    let dist = make_sampler(&counts, cfg.alpha)?;
    let mut stream = sample_batches(
        corpora.iter().zip(&framed).map(|(c, f)| (c.tag.clone(), f.as_slice())).collect(),
        &dist,
        cfg.batch_size,
        cfg.seed,
    )?;

    let mut adam = AdamState::new(&model.params, cfg.base_lr);
    let mut mask_rng = Rng::new(cfg.seed, Stream::Masking);
    let mut clock = CheckpointClock::new(cfg.checkpoint_every_sentences as u64);
    let mut stopper = EarlyStopper::new(StopMode::Min, cfg.patience);
    let mut best = BestKeeper::new();
    let mut metrics = Vec::new();
    let mut provenance = BTreeMap::new();
    let mut updates = 0u64;
    let mut stopped_early = false;
    let mut evaluated_at = None;

    let mut evaluate = |model: &LmModel<F>, updates: u64, seen: u64, metrics: &mut Vec<MetricsRecord>| -> Result<bool> {
        let ppl = masked_perplexity(model, &dev, dev_role.index(), cfg.eval_seed, &cfg.mask, cfg.eval_batch_size)?;
        let d = stopper.update(ppl);
        if d.improved {
            best.keep(&model.params);
        }
        log::info!("{phase} step {updates}: dev_ppl {ppl:.4}{}", if d.improved { " (best)" } else { "" });
        metrics.push(MetricsRecord {
            phase: phase.to_string(),
            step: updates,
            sentences_seen: seen,
            metric_name: "dev_ppl".into(),
            value: ppl,
            is_best: d.improved,
        });
        Ok(d.stop)
    };

    while updates < cfg.max_steps as u64 {
        let batch = stream.next().expect("batch stream is infinite");
        let source = corpora
            .iter()
            .find(|c| c.tag == batch.language)
            .expect("batch language comes from the corpora")
            .source;
        *provenance.entry(source).or_insert(0) += 1;
        let tokens = TokenBatch::from_sequences(&batch.items)?;
        let (masked, targets) = mask_batch(&tokens, model.vocab.len(), &cfg.mask, &mut mask_rng);
        let lang = batch.language.role.index();
        let (grads, _loss) = gradients(&model.params, dropout_rng(cfg.seed, updates), |g| {
            model.mlm_loss(g, &masked, &targets, lang)
        })?;
        apply_update(&mut model.params, &mut adam, grads, cfg.base_lr, cfg.clip_norm);
        updates += 1;
        if clock.advance(batch.items.len() as u64) > 0 {
            evaluated_at = Some(updates);
            if evaluate(&model, updates, clock.seen(), &mut metrics)? {
                stopped_early = true;
                break;
            }
        }
    }
    if updates > 0 && evaluated_at != Some(updates) {
        evaluate(&model, updates, clock.seen(), &mut metrics)?;
    }
    best.restore(&mut model.params);
    Ok(PhaseOutcome {
        model,
        metrics,
        updates,
        sentences_seen: clock.seen(),
        provenance,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::Vocabulary;
    use crate::transformer::{build_lm, ModelConfig};

    fn toy() -> (LmModel<f32>, Vec<Vec<u32>>) {
        let counts: BTreeMap<String, u64> = (0..12).map(|i| (format!("w{i}"), 1)).collect();
        let vocab = Vocabulary::from_counts(&counts);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            max_positions: 16,
            vocab_size: vocab.len(),
            dropout: 0.0,
            ..Default::default()
        };
        let model = build_lm(cfg, vocab, &mut Rng::new(1, Stream::Init)).unwrap();
        let mut rng = Rng::new(2, Stream::Synthetic);
        let sents = (0..50)
            .map(|_| {
                let start = rng.below(6) as u32;
                (0..6).map(|j| 5 + (start + j) % 12).collect()
            })
            .collect();
        (model, sents)
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 3e-3,
            batch_size: 10,
            checkpoint_every_sentences: 200,
            max_steps: steps,
            mask: crate::transformer::MaskConfig {
                select_prob: 0.3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (model, sents) = toy();
        let before = model.params.snapshot();
        let out = pretrain_mlm(model, &sents, &sents, &cfg(0)).unwrap();
        assert!(out.metrics.is_empty());
        assert!(before.iter().zip(out.model.params.snapshot()).all(|(a, b)| a.bit_eq(&b)));
    }

    #[test]
    fn pretraining_beats_uniform() {
        let (model, sents) = toy();
        let v = model.vocab.len() as f64;
        let out = pretrain_mlm(model, &sents, &sents, &cfg(150)).unwrap();
        let best = out.metrics.iter().map(|m| m.value).fold(f64::INFINITY, f64::min);
        assert!(best.ln() < v.ln(), "dev loss {} vs ln V {}", best.ln(), v.ln());
        let c = TrainConfig::default();
        let final_ppl =
            masked_perplexity(&out.model, &sents.iter().map(|s| frame(s, 16)).collect::<Vec<_>>(), 0, c.eval_seed, &cfg(0).mask, 64)
                .unwrap();
        assert_eq!(final_ppl, best);
        assert_eq!(out.provenance.keys().collect::<Vec<_>>(), [&DataSource::HmrMonolingual]);
    }

    #[test]
    fn finetune_requires_extension() {
        let (model, sents) = toy();
        assert!(finetune_lm(model, &sents, None, &sents, &cfg(1)).is_err());
    }

    #[test]
    fn lmr_only_batches() {
        let (mut model, sents) = toy();
        model.ensure_lmr_language();
        let c = TrainConfig {
            languages: LanguageSet::LmrOnly,
            ..cfg(5)
        };
        let out = finetune_lm(model, &sents, Some(&sents), &sents, &c).unwrap();
        assert_eq!(out.provenance, BTreeMap::from([(DataSource::LmrMonolingual, 5)]));
    }

    #[test]
    fn adapters_scheme_freezes_body() {
        let (mut model, sents) = toy();
        model.ensure_lmr_language();
        model.attach_adapters(4, &mut Rng::new(3, Stream::Init)).unwrap();
        let before = model.clone();
        let c = TrainConfig {
            scheme: Scheme::Adapters,
            ..cfg(20)
        };
        let out = finetune_lm(model, &sents, Some(&sents), &sents, &c).unwrap();
        let mut changed = 0;
        for (id, p) in before.params.iter() {
            let same = p.value.bit_eq(out.model.params.value(id));
            if crate::transformer::trains_under_adapters(&p.name) {
                changed += usize::from(!same);
            } else {
                assert!(same, "{} moved", p.name);
            }
        }
        assert!(changed > 0);
    }
}
