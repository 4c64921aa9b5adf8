use std::collections::BTreeMap;

use crate::corpus::{EpochCycler, Role};
use crate::decode::{bleu, detokenize, greedy_decode_batch, BleuResult};
use crate::error::{Error, Result};
use crate::numeric::{inv_sqrt_lr, AdamState, Rng, Scalar, Stream};
use crate::transformer::{NmtModel, TokenBatch, TrainableScheme};

use super::{
    apply_update, dae_noise, dropout_rng, frame, gradients, BestKeeper, DataSource, Directions, EarlyStopper,
    MetricsRecord, PhaseOutcome, StopMode, TrainConfig,
};

/// Dev pairs: unframed LMR source ids and detokenized HMR references.
#[derive(Debug, Clone, PartialEq)]
pub struct DevSet {
    pub sources: Vec<Vec<u32>>,
    pub references: Vec<String>,
}

impl DevSet {
    fn check(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::EmptyData("dev set is empty".into()));
        }
        if self.sources.len() != self.references.len() {
            return Err(Error::Config(format!(
                "dev set has {} sources but {} references",
                self.sources.len(),
                self.references.len()
            )));
        }
        Ok(())
    }
}

/// Greedy translations of unframed `sources`, detokenized.
pub fn translate_greedy<F: Scalar>(
    model: &NmtModel<F>,
    sources: &[Vec<u32>],
    src: Role,
    tgt: Role,
) -> Result<Vec<String>> {
    let max_pos = model.config.max_positions;
    let framed: Vec<Vec<u32>> = sources.iter().map(|s| frame(s, max_pos)).collect();
    let hyps = greedy_decode_batch(model, &framed, src.index(), tgt.index(), |i| 2 * sources[i].len() + 10)?;
    Ok(hyps
        .iter()
        .map(|h| detokenize(&model.vocab.decode(h.output())))
        .collect())
}

/// Greedy corpus BLEU of `dev` in the given direction.
pub fn evaluate_bleu<F: Scalar>(model: &NmtModel<F>, dev: &DevSet, src: Role, tgt: Role) -> Result<BleuResult> {
    dev.check()?;
    let hyps = translate_greedy(model, &dev.sources, src, tgt)?;
    bleu(&hyps, &dev.references)
}

/// Shared optimizer, stopping and bookkeeping of the NMT phases.
struct NmtLoop<'c, F: Scalar> {
    cfg: &'c TrainConfig,
    phase: &'static str,
    adam: AdamState<F>,
    stopper: EarlyStopper,
    best: BestKeeper<F>,
    metrics: Vec<MetricsRecord>,
    provenance: BTreeMap<DataSource, u64>,
    updates: u64,
    sentences: u64,
    evaluated_at: Option<u64>,
}

impl<'c, F: Scalar> NmtLoop<'c, F> {
    fn new(model: &NmtModel<F>, cfg: &'c TrainConfig, phase: &'static str) -> Self {
        NmtLoop {
            cfg,
            phase,
            adam: AdamState::new(&model.params, cfg.base_lr),
            stopper: EarlyStopper::new(StopMode::Max, cfg.patience),
            best: BestKeeper::new(),
            metrics: Vec::new(),
            provenance: BTreeMap::new(),
            updates: 0,
            sentences: 0,
            evaluated_at: None,
        }
    }

    fn done(&self) -> bool {
        self.updates >= self.cfg.max_steps as u64
    }

    /// One supervised update on framed pairs. Returns true when early
    /// stopping fired at the evaluation this update triggered.
    fn step(
        &mut self,
        model: &mut NmtModel<F>,
        src: &[Vec<u32>],
        tgt: &[Vec<u32>],
        langs: (Role, Role),
        source: DataSource,
        dev: &DevSet,
    ) -> Result<bool> {
        let src_b = TokenBatch::from_sequences(src)?;
        let tgt_b = TokenBatch::from_sequences(tgt)?;
        let (grads, _) = gradients(&model.params, dropout_rng(self.cfg.seed, self.updates), |g| {
            model.loss(g, &src_b, &tgt_b, langs.0.index(), langs.1.index(), self.cfg.label_smoothing)
        })?;
        let lr = inv_sqrt_lr(self.adam.step + 1, self.cfg.base_lr, self.cfg.warmup);
        apply_update(&mut model.params, &mut self.adam, grads, lr, self.cfg.clip_norm);
        self.updates += 1;
        self.sentences += src.len() as u64;
        *self.provenance.entry(source).or_insert(0) += 1;
        if self.updates.is_multiple_of(self.cfg.eval_every_updates as u64) {
            return self.evaluate(model, dev);
        }
        Ok(false)
    }

    fn evaluate(&mut self, model: &NmtModel<F>, dev: &DevSet) -> Result<bool> {
        self.evaluated_at = Some(self.updates);
        let score = evaluate_bleu(model, dev, Role::Lmr, Role::Hmr)?.score;
        let d = self.stopper.update(score);
        if d.improved {
            self.best.keep(&model.params);
        }
        log::info!(
            "{} update {}: dev_bleu_lmr2hmr {score:.2}{}",
            self.phase,
            self.updates,
            if d.improved { " (best)" } else { "" }
        );
        self.metrics.push(MetricsRecord {
            phase: self.phase.to_string(),
            step: self.updates,
            sentences_seen: self.sentences,
            metric_name: "dev_bleu_lmr2hmr".into(),
            value: score,
            is_best: d.improved,
        });
        Ok(d.stop)
    }

    fn finish(mut self, mut model: NmtModel<F>, dev: &DevSet, stopped_early: bool) -> Result<PhaseOutcome<NmtModel<F>>> {
        if self.updates > 0 && self.evaluated_at != Some(self.updates) {
            self.evaluate(&model, dev)?;
        }
        self.best.restore(&mut model.params);
        Ok(PhaseOutcome {
            model,
            metrics: self.metrics,
            updates: self.updates,
            sentences_seen: self.sentences,
            provenance: self.provenance,
            stopped_early,
        })
    }
}

fn pick(corpus: &[Vec<u32>], idx: &[usize]) -> Vec<Vec<u32>> {
    idx.iter().map(|&i| corpus[i].clone()).collect()
}

/// Unsupervised NMT: cycles of DAE(HMR), DAE(LMR), BT(HMR→LMR→HMR) and
/// BT(LMR→HMR→LMR), one optimizer update each. `max_steps` counts updates.
/// Only monolingual data is used for training; `dev` drives stopping.
pub fn train_unmt<F: Scalar>(
    mut model: NmtModel<F>,
    hmr: &[Vec<u32>],
    lmr: &[Vec<u32>],
    dev: &DevSet,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome<NmtModel<F>>> {
    cfg.validate()?;
    dev.check()?;
    if hmr.is_empty() || lmr.is_empty() {
        return Err(Error::EmptyData("unsupervised NMT needs both monolingual corpora".into()));
    }
    model.set_trainable(TrainableScheme::All)?;
    let max_pos = model.config.max_positions;
    let mut cyclers = [
        EpochCycler::new(hmr.len(), cfg.seed, 1),
        EpochCycler::new(lmr.len(), cfg.seed, 2),
    ];
    let corpora = [hmr, lmr];
    let sources = [DataSource::HmrMonolingual, DataSource::LmrMonolingual];
    let mut noise_rng = Rng::new(cfg.seed, Stream::Noise);
    let mut lp = NmtLoop::new(&model, cfg, "unmt");
    let mut stopped = false;
    'outer: while !lp.done() {
        for sub in 0..4 {
            if lp.done() {
                break 'outer;
            }
            let role = if sub % 2 == 0 { Role::Hmr } else { Role::Lmr };
            let li = role.index();
            let batch = pick(corpora[li], &cyclers[li].take(cfg.batch_size));
            let clean: Vec<Vec<u32>> = batch.iter().map(|s| frame(s, max_pos)).collect();
            let (src, langs) = if sub < 2 {
                let noisy = batch
                    .iter()
                    .map(|s| frame(&dae_noise(s, &cfg.noise, &mut noise_rng), max_pos))
                    .collect::<Vec<_>>();
                (noisy, (role, role))
            } else {
                let other = role.other();
                let framed = &clean;
                let cap = |i: usize| {
                    let n = batch[i].len() as f64;
                    ((1.3 * n).ceil() as usize + 5).min(max_pos - 2)
                };
                let hyps = greedy_decode_batch(&model, framed, role.index(), other.index(), cap)?;
                let synth = hyps.iter().map(|h| frame(h.output(), max_pos)).collect::<Vec<_>>();
                (synth, (other, role))
            };
            if lp.step(&mut model, &src, &clean, langs, sources[li], dev)? {
                stopped = true;
                break 'outer;
            }
        }
    }
    lp.finish(model, dev, stopped)
}

/// Supervised NMT on aligned pairs, alternating directions per update when
/// `cfg.directions` is `BOTH`.
pub fn train_supervised<F: Scalar>(
    mut model: NmtModel<F>,
    hmr: &[Vec<u32>],
    lmr: &[Vec<u32>],
    dev: &DevSet,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome<NmtModel<F>>> {
    cfg.validate()?;
    dev.check()?;
    if hmr.len() != lmr.len() {
        return Err(Error::Config(format!(
            "parallel corpus is misaligned: {} HMR vs {} LMR lines",
            hmr.len(),
            lmr.len()
        )));
    }
    if hmr.is_empty() {
        return Err(Error::EmptyData("parallel corpus is empty".into()));
    }
    model.set_trainable(TrainableScheme::All)?;
    let max_pos = model.config.max_positions;
    let hmr: Vec<Vec<u32>> = hmr.iter().map(|s| frame(s, max_pos)).collect();
    let lmr: Vec<Vec<u32>> = lmr.iter().map(|s| frame(s, max_pos)).collect();
    let mut cycler = EpochCycler::new(hmr.len(), cfg.seed, 3);
    let mut lp = NmtLoop::new(&model, cfg, "supervised");
    let mut stopped = false;
    while !lp.done() {
        let to_hmr = match cfg.directions {
            Directions::Both => lp.updates.is_multiple_of(2),
            Directions::LmrToHmr => true,
            Directions::HmrToLmr => false,
        };
        let idx = cycler.take(cfg.batch_size);
        let (h, l) = (pick(&hmr, &idx), pick(&lmr, &idx));
        let (src, tgt, langs) = if to_hmr {
            (l, h, (Role::Lmr, Role::Hmr))
        } else {
            (h, l, (Role::Hmr, Role::Lmr))
        };
        if lp.step(&mut model, &src, &tgt, langs, DataSource::Parallel, dev)? {
            stopped = true;
            break;
        }
    }
    lp.finish(model, dev, stopped)
}
