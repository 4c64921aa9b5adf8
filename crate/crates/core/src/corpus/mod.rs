//! Corpus ingestion, 13a tokenization, length filtering and multilingual
//! sampling.

mod sampling;
mod tokenize;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

pub use sampling::{make_sampler, sample_batches, Batch, BatchStream, EpochCycler, SamplingDistribution};
pub use tokenize::{tokenize_13a, tokenize_13a_string};

/// Which side of the resource asymmetry a language sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Hmr,
    Lmr,
}

impl Role {
    /// Row of the language embedding used for this role.
    pub fn index(self) -> usize {
        match self {
            Role::Hmr => 0,
            Role::Lmr => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Hmr => "hmr",
            Role::Lmr => "lmr",
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::Hmr => Role::Lmr,
            Role::Lmr => Role::Hmr,
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s.to_ascii_lowercase().as_str() {
            "hmr" => Ok(Role::Hmr),
            "lmr" => Ok(Role::Lmr),
            _ => Err(Error::UnknownLanguage(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguageTag {
    pub id: String,
    pub role: Role,
}

impl LanguageTag {
    pub fn new(id: impl Into<String>, role: Role) -> Self {
        LanguageTag {
            id: id.into(),
            role,
        }
    }

    pub fn hmr() -> Self {
        Self::new("hmr", Role::Hmr)
    }

    pub fn lmr() -> Self {
        Self::new("lmr", Role::Lmr)
    }
}

/// The two languages of one experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguagePair {
    pub hmr: LanguageTag,
    pub lmr: LanguageTag,
}

impl LanguagePair {
    pub fn new(hmr: LanguageTag, lmr: LanguageTag) -> Result<Self> {
        if hmr.role != Role::Hmr || lmr.role != Role::Lmr {
            return Err(Error::Config("a language pair needs one HMR and one LMR tag".into()));
        }
        if hmr.id == lmr.id {
            return Err(Error::Config(format!("both languages are tagged {}", hmr.id)));
        }
        Ok(LanguagePair { hmr, lmr })
    }

    pub fn get(&self, role: Role) -> &LanguageTag {
        match role {
            Role::Hmr => &self.hmr,
            Role::Lmr => &self.lmr,
        }
    }
}

impl Default for LanguagePair {
    fn default() -> Self {
        LanguagePair {
            hmr: LanguageTag::hmr(),
            lmr: LanguageTag::lmr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub language: LanguageTag,
    pub lines: Vec<String>,
    pub source_path: String,
}

impl RawCorpus {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Word,
    Subword,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCorpus {
    pub language: LanguageTag,
    pub sentences: Vec<Vec<String>>,
    pub token_kind: TokenKind,
}

impl TokenizedCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Tokens joined by single spaces, one sentence per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let err = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(err)?;
    }
    let mut f = fs::File::create(path).map_err(err)?;
    f.write_all(text.as_bytes()).map_err(err)
}

/// Reads a UTF-8 file, returning its lines with blank lines dropped.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw).map_err(|_| Error::Decode {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if !line.trim().is_empty() {
            lines.push(line.to_string());
        }
    }
    Ok(lines)
}

pub fn load_corpus(path: &Path, language: LanguageTag) -> Result<RawCorpus> {
    let lines = read_lines(path)?;
    log::info!("loaded {} lines for {} from {}", lines.len(), language.id, path.display());
    Ok(RawCorpus {
        language,
        lines,
        source_path: path.display().to_string(),
    })
}

/// 13a-tokenizes every line (order preserved).
pub fn tokenize_corpus(raw: &RawCorpus) -> TokenizedCorpus {
    TokenizedCorpus {
        language: raw.language.clone(),
        sentences: parallel::map(&raw.lines, |l| tokenize_13a(l)),
        token_kind: TokenKind::Word,
    }
}

/// Outcome of [`filter_by_length`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: usize,
    pub removed: usize,
    pub warning: Option<String>,
}

/// Drops (never truncates) sentences longer than `max_len` subwords.
pub fn filter_by_length(
    corpus: TokenizedCorpus,
    max_len: usize,
) -> Result<(TokenizedCorpus, FilterReport)> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    if corpus.token_kind != TokenKind::Subword {
        return Err(Error::Config("length filtering applies to subword corpora".into()));
    }
    let before = corpus.sentences.len();
    let sentences: Vec<Vec<String>> = corpus
        .sentences
        .into_iter()
        .filter(|s| s.len() <= max_len)
        .collect();
    let kept = sentences.len();
    let warning = (kept == 0 && before > 0).then(|| {
        let msg = format!("all {before} sentences of {} exceed {max_len} tokens", corpus.language.id);
        log::warn!("{msg}");
        msg
    });
    Ok((
        TokenizedCorpus {
            language: corpus.language,
            sentences,
            token_kind: TokenKind::Subword,
        },
        FilterReport {
            kept,
            removed: before - kept,
            warning,
        },
    ))
}
