use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relm_core::corpus::Role;

#[derive(Debug, Parser)]
#[command(name = "relm", version, about = "Vocabulary-extended LM reuse for low-resource NMT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long, value_name = "PATH")]
    pub config_file: Option<PathBuf>,
    /// Override, e.g. `--config train.max_steps=500` (repeatable).
    #[arg(long = "config", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Lang {
    Hmr,
    Lmr,
}

impl From<Lang> for Role {
    fn from(l: Lang) -> Role {
        match l {
            Lang::Hmr => Role::Hmr,
            Lang::Lmr => Role::Lmr,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn BPE merges on one corpus; writes merges.txt and vocab.txt.
    LearnBpe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Segment a text file with a merge table.
    ApplyBpe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Learn joint merges on an α-sampled HMR+LMR mix; writes merges.txt
    /// and the LMR vocabulary vocab_lmr.txt.
    JointBpe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hmr: PathBuf,
        #[arg(long)]
        lmr: PathBuf,
    },
    /// Union of two vocabularies keeping the HMR indices; writes vocab.txt.
    ExtendVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hmr_vocab: PathBuf,
        #[arg(long)]
        lmr_vocab: PathBuf,
    },
    /// Extension arithmetic from vocabulary files or raw counts, and
    /// optionally segmentation statistics of a corpus.
    VocabStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "lmr_vocab")]
        hmr_vocab: Option<PathBuf>,
        #[arg(long)]
        lmr_vocab: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["hmr_vocab", "lmr_vocab"], requires_all = ["size_lmr", "overlap"])]
        size_hmr: Option<usize>,
        #[arg(long)]
        size_lmr: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        /// Corpus to measure fertility on (needs --merges).
        #[arg(long, requires = "merges")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        merges: Option<PathBuf>,
    },
    /// Masked-LM pretraining on HMR text; writes lm.ckpt and metrics.jsonl.
    PretrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hmr: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Extend (if --vocab is larger) and fine-tune an LM on LMR (± HMR).
    FinetuneLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lmr: PathBuf,
        #[arg(long)]
        hmr: Option<PathBuf>,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        hmr_merges: PathBuf,
        /// Merges for LMR text (the joint table, or the HMR table for the
        /// no-extension ablation).
        #[arg(long)]
        lmr_merges: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Translation model from an LM checkpoint, or randomly initialized.
    InitNmt {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "vocab")]
        random: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Unsupervised NMT (denoising + online back-translation).
    TrainUnmt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: NmtData,
    },
    /// Supervised NMT on line-aligned --hmr/--lmr files.
    TrainSupervised {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: NmtData,
    },
    /// Translate a text file; one detokenized line per input line.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "lmr")]
        src: Lang,
        #[arg(long, value_enum, default_value = "hmr")]
        tgt: Lang,
        /// Overrides decode.beam.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, conflicts_with = "beam")]
        greedy: bool,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    ScoreBleu {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Synthetic HMR/LMR pair per the [synthetic] config table.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
    },
    /// Run every phase of a manifest in order.
    RunManifest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct NmtData {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub hmr: PathBuf,
    #[arg(long)]
    pub lmr: PathBuf,
    /// LMR side of the dev pairs.
    #[arg(long)]
    pub dev_src: PathBuf,
    /// HMR side of the dev pairs.
    #[arg(long)]
    pub dev_ref: PathBuf,
    #[arg(long)]
    pub hmr_merges: PathBuf,
    #[arg(long)]
    pub lmr_merges: PathBuf,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::LearnBpe { common, .. }
            | Command::ApplyBpe { common, .. }
            | Command::JointBpe { common, .. }
            | Command::ExtendVocab { common, .. }
            | Command::VocabStats { common, .. }
            | Command::PretrainLm { common, .. }
            | Command::FinetuneLm { common, .. }
            | Command::InitNmt { common, .. }
            | Command::TrainUnmt { common, .. }
            | Command::TrainSupervised { common, .. }
            | Command::Translate { common, .. }
            | Command::ScoreBleu { common, .. }
            | Command::GenSynthetic { common }
            | Command::RunManifest { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::LearnBpe { .. } => "learn-bpe",
            Command::ApplyBpe { .. } => "apply-bpe",
            Command::JointBpe { .. } => "joint-bpe",
            Command::ExtendVocab { .. } => "extend-vocab",
            Command::VocabStats { .. } => "vocab-stats",
            Command::PretrainLm { .. } => "pretrain-lm",
            Command::FinetuneLm { .. } => "finetune-lm",
            Command::InitNmt { .. } => "init-nmt",
            Command::TrainUnmt { .. } => "train-unmt",
            Command::TrainSupervised { .. } => "train-supervised",
            Command::Translate { .. } => "translate",
            Command::ScoreBleu { .. } => "score-bleu",
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::RunManifest { .. } => "run-manifest",
        }
    }
}
