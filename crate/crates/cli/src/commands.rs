//! One function per subcommand. Each returns a JSON summary that embeds
//! the resolved config.

use std::path::{Path, PathBuf};

use relm_core::bpe::{
    apply_bpe_corpus, build_vocabulary, extend_vocabulary, learn_bpe, learn_joint_bpe, segmentation_stats,
    word_frequencies, ExtensionReport, MergeTable, Vocabulary,
};
use relm_core::corpus::{filter_by_length, load_corpus, read_lines, tokenize_corpus, LanguageTag, Role, TokenizedCorpus};
use relm_core::decode::{beam_search, bleu, detokenize, greedy_decode_batch};
use relm_core::numeric::{Rng, Stream};
use relm_core::synthetic::gen_synthetic;
use relm_core::training::{
    finetune_lm, pretrain_mlm, train_supervised, train_unmt, write_metrics, DevSet, PhaseOutcome, Scheme,
};
use relm_core::transformer::{
    build_lm, build_nmt, init_nmt_from_lm, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, LmModel,
    ModelConfig, ModelState, NmtModel,
};
use serde_json::{json, Value};

use crate::cli::{Command, Common, NmtData};
use crate::config::{resolve, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest;

/// Training precision of every phase.
type F = f32;

/// Init-stream tags, so each fresh tensor group has its own draws.
const TAG_EXTENSION: u64 = 1;
const TAG_ADAPTERS: u64 = 2;
const TAG_NMT: u64 = 3;

pub fn run(command: &Command) -> CliResult<Value> {
    let common = command.common();
    let cfg = resolve(common.config_file.as_deref(), &common.overrides, common.seed)?;
    let body = match command {
        Command::LearnBpe { input, .. } => learn_bpe_cmd(&cfg, out_dir(common)?, input)?,
        Command::ApplyBpe {
            merges, input, output, ..
        } => apply_bpe_cmd(merges, input, output)?,
        Command::JointBpe { hmr, lmr, .. } => joint_bpe_cmd(&cfg, out_dir(common)?, hmr, lmr)?,
        Command::ExtendVocab {
            hmr_vocab, lmr_vocab, ..
        } => extend_vocab_cmd(out_dir(common)?, hmr_vocab, lmr_vocab)?,
        Command::VocabStats {
            hmr_vocab,
            lmr_vocab,
            size_hmr,
            size_lmr,
            overlap,
            corpus,
            merges,
            ..
        } => vocab_stats_cmd(
            hmr_vocab.as_deref().zip(lmr_vocab.as_deref()),
            size_hmr.zip(*size_lmr).zip(*overlap),
            corpus.as_deref().zip(merges.as_deref()),
        )?,
        Command::PretrainLm {
            hmr, dev, merges, vocab, ..
        } => pretrain_cmd(&cfg, out_dir(common)?, hmr, dev, merges, vocab)?,
        Command::FinetuneLm {
            checkpoint,
            lmr,
            hmr,
            dev,
            hmr_merges,
            lmr_merges,
            vocab,
            ..
        } => finetune_cmd(
            &cfg,
            out_dir(common)?,
            checkpoint,
            lmr,
            hmr.as_deref(),
            dev,
            hmr_merges,
            lmr_merges,
            vocab,
        )?,
        Command::InitNmt {
            checkpoint, random, vocab, ..
        } => init_nmt_cmd(&cfg, out_dir(common)?, checkpoint.as_deref(), *random, vocab.as_deref())?,
        Command::TrainUnmt { data, .. } => nmt_cmd(&cfg, out_dir(common)?, data, false)?,
        Command::TrainSupervised { data, .. } => nmt_cmd(&cfg, out_dir(common)?, data, true)?,
        Command::Translate {
            checkpoint,
            input,
            merges,
            output,
            src,
            tgt,
            beam,
            greedy,
            ..
        } => {
            let beam = if *greedy { 1 } else { beam.unwrap_or(cfg.decode.beam) };
            translate_cmd(&cfg, checkpoint, input, merges, output, (*src).into(), (*tgt).into(), beam)?
        }
        Command::ScoreBleu { hyp, reference, .. } => score_cmd(hyp, reference)?,
        Command::GenSynthetic { .. } => gen_synthetic_cmd(&cfg, out_dir(common)?)?,
        Command::RunManifest { manifest, .. } => manifest::run_manifest(manifest, out_dir(common)?)?,
    };
    let mut summary = json!({ "command": command.name(), "status": "ok" });
    let obj = summary.as_object_mut().expect("object literal");
    if let Value::Object(fields) = body {
        obj.extend(fields);
    }
    if !matches!(command, Command::RunManifest { .. }) {
        obj.insert("config".into(), serde_json::to_value(&cfg).expect("config serializes"));
    }
    Ok(summary)
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this subcommand needs --out".into()))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn tag(role: Role) -> LanguageTag {
    match role {
        Role::Hmr => LanguageTag::hmr(),
        Role::Lmr => LanguageTag::lmr(),
    }
}

fn words(path: &Path, role: Role) -> CliResult<TokenizedCorpus> {
    Ok(tokenize_corpus(&load_corpus(path, tag(role))?))
}

/// Segments and indexes every line, keeping line alignment.
fn encode_aligned(corpus: &TokenizedCorpus, merges: &MergeTable, vocab: &Vocabulary) -> Vec<Vec<u32>> {
    apply_bpe_corpus(merges, corpus)
        .sentences
        .iter()
        .map(|s| vocab.encode(s))
        .collect()
}

/// Training text: segmented, length-filtered and indexed.
fn encode_training(
    path: &Path,
    role: Role,
    merges: &MergeTable,
    vocab: &Vocabulary,
    max_len: usize,
) -> CliResult<Vec<Vec<u32>>> {
    let seg = apply_bpe_corpus(merges, &words(path, role)?);
    let (kept, report) = filter_by_length(seg, max_len)?;
    if report.removed > 0 {
        log::info!("{}: dropped {} sentences over {max_len} subwords", path.display(), report.removed);
    }
    Ok(kept.sentences.iter().map(|s| vocab.encode(s)).collect())
}

fn save(path: &Path, model: ModelState<F>, seed: u64, step: u64, phase: &str) -> CliResult<()> {
    let ck = Checkpoint {
        model,
        optimizer: None,
        meta: CheckpointMeta {
            seed,
            step,
            phase: phase.to_string(),
        },
    };
    save_checkpoint(&ck, path)?;
    Ok(())
}

fn phase_summary<M>(out: &PhaseOutcome<M>, metrics_path: &Path) -> Value {
    let best = out.metrics.iter().find(|m| m.is_best && Some(m.value) == best_value(out));
    json!({
        "updates": out.updates,
        "sentences_seen": out.sentences_seen,
        "stopped_early": out.stopped_early,
        "evaluations": out.metrics.len(),
        "best_metric": best.map(|m| json!({ "name": m.metric_name, "value": m.value, "step": m.step })),
        "provenance": out.provenance,
        "metrics": metrics_path,
    })
}

fn best_value<M>(out: &PhaseOutcome<M>) -> Option<f64> {
    out.metrics.iter().filter(|m| m.is_best).map(|m| m.value).next_back()
}

fn fresh_metrics(out: &Path) -> CliResult<PathBuf> {
    let path = out.join("metrics.jsonl");
    if path.exists() {
        std::fs::remove_file(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(path)
}

fn learn_bpe_cmd(cfg: &RunConfig, out: &Path, input: &Path) -> CliResult<Value> {
    let corpus = words(input, Role::Hmr)?;
    let merges = learn_bpe(&word_frequencies(corpus.sentences.iter()), cfg.bpe.merges);
    let vocab = build_vocabulary(&corpus, &merges)?;
    create_dir(out)?;
    merges.save(&out.join("merges.txt"))?;
    vocab.save(&out.join("vocab.txt"))?;
    Ok(json!({ "merges": merges.len(), "vocab_size": vocab.len(), "out": out }))
}

fn apply_bpe_cmd(merges: &Path, input: &Path, output: &Path) -> CliResult<Value> {
    let merges = MergeTable::load(merges)?;
    let seg = apply_bpe_corpus(&merges, &words(input, Role::Hmr)?);
    seg.save(output)?;
    Ok(json!({ "sentences": seg.len(), "output": output }))
}

fn joint_bpe_cmd(cfg: &RunConfig, out: &Path, hmr: &Path, lmr: &Path) -> CliResult<Value> {
    let h = words(hmr, Role::Hmr)?;
    let l = words(lmr, Role::Lmr)?;
    let sample = (cfg.bpe.joint_sample > 0).then_some(cfg.bpe.joint_sample);
    let merges = learn_joint_bpe(&[h, l.clone()], cfg.bpe.alpha, cfg.bpe.joint_merges, cfg.train.seed, sample)?;
    let v_lmr = build_vocabulary(&l, &merges)?;
    create_dir(out)?;
    merges.save(&out.join("merges.txt"))?;
    v_lmr.save(&out.join("vocab_lmr.txt"))?;
    Ok(json!({ "merges": merges.len(), "lmr_vocab_size": v_lmr.len(), "out": out }))
}

fn extend_vocab_cmd(out: &Path, hmr_vocab: &Path, lmr_vocab: &Path) -> CliResult<Value> {
    let (ext, report) = extend_vocabulary(&Vocabulary::load(hmr_vocab)?, &Vocabulary::load(lmr_vocab)?)?;
    create_dir(out)?;
    ext.save(&out.join("vocab.txt"))?;
    Ok(json!({ "report": report, "report_line": report.to_line(), "vocab_size": ext.len(), "out": out }))
}

fn vocab_stats_cmd(
    files: Option<(&Path, &Path)>,
    counts: Option<((usize, usize), usize)>,
    corpus: Option<(&Path, &Path)>,
) -> CliResult<Value> {
    let report = match (files, counts) {
        (Some((h, l)), _) => Some(extend_vocabulary(&Vocabulary::load(h)?, &Vocabulary::load(l)?)?.1),
        (None, Some(((h, l), o))) => Some(ExtensionReport::from_counts(h, l, o)?),
        (None, None) => None,
    };
    let stats = match corpus {
        Some((c, m)) => Some(segmentation_stats(&words(c, Role::Lmr)?, &MergeTable::load(m)?)?),
        None => None,
    };
    if report.is_none() && stats.is_none() {
        return Err(CliError::Usage(
            "vocab-stats needs vocabularies, counts or a corpus with merges".into(),
        ));
    }
    Ok(json!({
        "report": report,
        "report_line": report.map(|r| r.to_line()),
        "segmentation": stats,
    }))
}

fn pretrain_cmd(cfg: &RunConfig, out: &Path, hmr: &Path, dev: &Path, merges: &Path, vocab: &Path) -> CliResult<Value> {
    let merges = MergeTable::load(merges)?;
    let vocab = Vocabulary::load(vocab)?;
    let train = encode_training(hmr, Role::Hmr, &merges, &vocab, cfg.bpe.max_len)?;
    let dev = encode_aligned(&words(dev, Role::Hmr)?, &merges, &vocab);
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        n_languages: 1,
        adapter_dim: None,
        ..cfg.model.clone()
    };
    let seed = cfg.train.seed;
    let model: LmModel<F> = build_lm(model_cfg, vocab, &mut Rng::new(seed, Stream::Init))?;
    let outcome = pretrain_mlm(model, &train, &dev, &cfg.train)?;
    create_dir(out)?;
    let metrics = fresh_metrics(out)?;
    write_metrics(&metrics, &outcome.metrics)?;
    let ck = out.join("lm.ckpt");
    let summary = phase_summary(&outcome, &metrics);
    save(&ck, ModelState::Lm(outcome.model), seed, outcome.updates, "pretrain")?;
    Ok(json!({ "phase": summary, "checkpoint": ck }))
}

#[allow(clippy::too_many_arguments)]
fn finetune_cmd(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    lmr: &Path,
    hmr: Option<&Path>,
    dev: &Path,
    hmr_merges: &Path,
    lmr_merges: &Path,
    vocab: &Path,
) -> CliResult<Value> {
    let seed = cfg.train.seed;
    let mut model: LmModel<F> = load_checkpoint(checkpoint)?.model.into_lm()?;
    let vocab = Vocabulary::load(vocab)?;
    let before = model.vocab.len();
    if vocab != model.vocab {
        model = model.extend_embeddings(&vocab, &mut Rng::with_tag(seed, Stream::Init, TAG_EXTENSION))?;
    } else {
        model.ensure_lmr_language();
    }
    let added = model.vocab.len() - before;
    if cfg.train.scheme == Scheme::Adapters && !model.has_adapters() {
        let dim = cfg
            .model
            .adapter_dim
            .ok_or_else(|| CliError::Config("train.scheme = ADAPTERS needs model.adapter_dim".into()))?;
        model.attach_adapters(dim, &mut Rng::with_tag(seed, Stream::Init, TAG_ADAPTERS))?;
    }
    let hmr_merges = MergeTable::load(hmr_merges)?;
    let lmr_merges = MergeTable::load(lmr_merges)?;
    let lmr_ids = encode_training(lmr, Role::Lmr, &lmr_merges, &vocab, cfg.bpe.max_len)?;
    let hmr_ids = match hmr {
        Some(p) => Some(encode_training(p, Role::Hmr, &hmr_merges, &vocab, cfg.bpe.max_len)?),
        None => None,
    };
    let dev = encode_aligned(&words(dev, Role::Lmr)?, &lmr_merges, &vocab);
    let outcome = finetune_lm(model, &lmr_ids, hmr_ids.as_deref(), &dev, &cfg.train)?;
    create_dir(out)?;
    let metrics = fresh_metrics(out)?;
    write_metrics(&metrics, &outcome.metrics)?;
    let ck = out.join("lm.ckpt");
    let summary = phase_summary(&outcome, &metrics);
    save(&ck, ModelState::Lm(outcome.model), seed, outcome.updates, "finetune")?;
    Ok(json!({ "phase": summary, "checkpoint": ck, "rows_added": added }))
}

fn init_nmt_cmd(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    random: bool,
    vocab: Option<&Path>,
) -> CliResult<Value> {
    let seed = cfg.train.seed;
    let mut rng = Rng::with_tag(seed, Stream::Init, TAG_NMT);
    let model: NmtModel<F> = match (random, checkpoint, vocab) {
        (true, _, Some(v)) => {
            let vocab = Vocabulary::load(v)?;
            let model_cfg = ModelConfig {
                vocab_size: vocab.len(),
                n_languages: 2,
                adapter_dim: None,
                ..cfg.model.clone()
            };
            build_nmt(model_cfg, vocab, &mut rng)?
        }
        (false, Some(ck), _) => {
            let lm: LmModel<F> = load_checkpoint(ck)?.model.into_lm()?;
            init_nmt_from_lm(&lm, &mut rng)?
        }
        _ => return Err(CliError::Usage("init-nmt needs --checkpoint, or --random with --vocab".into())),
    };
    create_dir(out)?;
    let ck = out.join("nmt.ckpt");
    let params = model.params.element_count();
    save(&ck, ModelState::Nmt(model), seed, 0, "init")?;
    Ok(json!({ "checkpoint": ck, "random": random, "parameters": params }))
}

fn nmt_cmd(cfg: &RunConfig, out: &Path, data: &NmtData, supervised: bool) -> CliResult<Value> {
    let seed = cfg.train.seed;
    let model: NmtModel<F> = load_checkpoint(&data.checkpoint)?.model.into_nmt()?;
    let hmr_merges = MergeTable::load(&data.hmr_merges)?;
    let lmr_merges = MergeTable::load(&data.lmr_merges)?;
    let vocab = model.vocab.clone();
    let dev = DevSet {
        sources: encode_aligned(&words(&data.dev_src, Role::Lmr)?, &lmr_merges, &vocab),
        references: read_lines(&data.dev_ref)?,
    };
    let (outcome, phase) = if supervised {
        let hmr = encode_aligned(&words(&data.hmr, Role::Hmr)?, &hmr_merges, &vocab);
        let lmr = encode_aligned(&words(&data.lmr, Role::Lmr)?, &lmr_merges, &vocab);
        (train_supervised(model, &hmr, &lmr, &dev, &cfg.train)?, "supervised")
    } else {
        let hmr = encode_training(&data.hmr, Role::Hmr, &hmr_merges, &vocab, cfg.bpe.max_len)?;
        let lmr = encode_training(&data.lmr, Role::Lmr, &lmr_merges, &vocab, cfg.bpe.max_len)?;
        (train_unmt(model, &hmr, &lmr, &dev, &cfg.train)?, "unmt")
    };
    create_dir(out)?;
    let metrics = fresh_metrics(out)?;
    write_metrics(&metrics, &outcome.metrics)?;
    let ck = out.join("nmt.ckpt");
    let summary = phase_summary(&outcome, &metrics);
    save(&ck, ModelState::Nmt(outcome.model), seed, outcome.updates, phase)?;
    Ok(json!({ "phase": summary, "checkpoint": ck }))
}

#[allow(clippy::too_many_arguments)]
fn translate_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    merges: &Path,
    output: &Path,
    src: Role,
    tgt: Role,
    beam: usize,
) -> CliResult<Value> {
    if beam == 0 {
        return Err(CliError::Config("beam must be at least 1".into()));
    }
    let model: NmtModel<F> = load_checkpoint(checkpoint)?.model.into_nmt()?;
    let merges = MergeTable::load(merges)?;
    let max_pos = model.config.max_positions;
    let sources: Vec<Vec<u32>> = encode_aligned(&words(input, src)?, &merges, &model.vocab)
        .into_iter()
        .map(|s| {
            let keep = s.len().min(max_pos - 2);
            let mut v = vec![relm_core::bpe::BOS];
            v.extend_from_slice(&s[..keep]);
            v.push(relm_core::bpe::EOS);
            v
        })
        .collect();
    let cap = |i: usize| cfg.decode.max_len(sources[i].len() - 2);
    let outputs: Vec<Vec<u32>> = if beam == 1 {
        greedy_decode_batch(&model, &sources, src.index(), tgt.index(), cap)?
            .into_iter()
            .map(|h| h.output().to_vec())
            .collect()
    } else {
        sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                beam_search(&model, s, src.index(), tgt.index(), beam, cap(i), cfg.decode.length_penalty)
                    .map(|h| h.output().to_vec())
            })
            .collect::<relm_core::Result<_>>()?
    };
    let mut text = String::new();
    for o in &outputs {
        text.push_str(&detokenize(&model.vocab.decode(o)));
        text.push('\n');
    }
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(output, &text)?;
    Ok(json!({ "sentences": outputs.len(), "beam": beam, "output": output }))
}

fn score_cmd(hyp: &Path, reference: &Path) -> CliResult<Value> {
    let read_all = |p: &Path| -> CliResult<Vec<String>> {
        let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        Ok(text.lines().map(str::to_string).collect())
    };
    let r = bleu(&read_all(hyp)?, &read_all(reference)?)?;
    Ok(json!({ "bleu": r, "signature": "c.mixed+#.1+s.exp+tok.13a" }))
}

fn gen_synthetic_cmd(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let pair = gen_synthetic(&cfg.synthetic)?;
    pair.save(out)?;
    Ok(json!({
        "out": out,
        "hmr": pair.hmr.len(),
        "lmr": pair.lmr.len(),
        "dev": pair.dev_hmr.len(),
        "parallel": pair.parallel_hmr.len(),
    }))
}
