use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_lines, write_text};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Special,
    Pretrained,
    Extension,
}

impl Segment {
    fn name(self) -> &'static str {
        match self {
            Segment::Special => "special",
            Segment::Pretrained => "pretrained",
            Segment::Extension => "extension",
        }
    }
}

/// Token ↔ index bijection with three contiguous segments:
/// specials `0..5`, pretrained `5..p`, extension `p..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequency: Vec<u64>,
    index: HashMap<String, u32>,
    pretrained_end: usize,
}

/// Counts from [`extend_vocabulary`], over non-special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub size_hmr: usize,
    pub size_lmr: usize,
    pub overlap: usize,
    pub new_items: usize,
}

impl ExtensionReport {
    pub fn from_counts(size_hmr: usize, size_lmr: usize, overlap: usize) -> Result<Self> {
        if overlap > size_hmr.min(size_lmr) {
            return Err(Error::Vocabulary(format!(
                "overlap {overlap} exceeds min({size_hmr}, {size_lmr})"
            )));
        }
        Ok(ExtensionReport {
            size_hmr,
            size_lmr,
            overlap,
            new_items: size_lmr - overlap,
        })
    }

    pub fn to_line(&self) -> String {
        format!(
            "size_hmr={} size_lmr={} overlap={} new_items={}",
            self.size_hmr, self.size_lmr, self.overlap, self.new_items
        )
    }
}

impl Vocabulary {
    /// The five special tokens only.
    pub fn specials() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            frequency: Vec::new(),
            index: HashMap::new(),
            pretrained_end: NUM_SPECIAL,
        };
        for t in SPECIAL_TOKENS {
            v.push(t.to_string(), 0);
        }
        v
    }

    fn push(&mut self, token: String, freq: u64) {
        self.index.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
        self.frequency.push(freq);
    }

    /// Pretrained-segment vocabulary from token counts, ordered by
    /// (frequency descending, token ascending).
    pub fn from_counts(counts: &BTreeMap<String, u64>) -> Self {
        let mut v = Vocabulary::specials();
        for (t, c) in sort_by_frequency(counts) {
            if !v.index.contains_key(&t) {
                v.push(t, c);
            }
        }
        v.pretrained_end = v.tokens.len();
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= NUM_SPECIAL
    }

    /// Tokens outside the special segment.
    pub fn non_special_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL
    }

    pub fn pretrained_end(&self) -> usize {
        self.pretrained_end
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn frequency(&self, index: u32) -> u64 {
        self.frequency[index as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn segment(&self, index: u32) -> Segment {
        let i = index as usize;
        if i < NUM_SPECIAL {
            Segment::Special
        } else if i < self.pretrained_end {
            Segment::Pretrained
        } else {
            Segment::Extension
        }
    }

    /// Index of `token`, or `<unk>`.
    pub fn encode_token(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// True when every entry of `base` sits at the same index here.
    pub fn extends(&self, base: &Vocabulary) -> bool {
        base.len() <= self.len() && base.tokens.iter().zip(&self.tokens).all(|(a, b)| a == b)
    }

    /// `token index frequency segment`, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (t, f)) in self.tokens.iter().zip(&self.frequency).enumerate() {
            s.push_str(&format!("{t} {i} {f} {}\n", self.segment(i as u32).name()));
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        Self::parse_lines(lines.iter().copied(), origin)
    }

    fn parse_lines<'a>(lines: impl Iterator<Item = &'a str>, origin: &Path) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            frequency: Vec::new(),
            index: HashMap::new(),
            pretrained_end: 0,
        };
        let mut saw_extension = false;
        for (i, line) in lines.enumerate() {
            let bad = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(' ').collect();
            let [token, index, freq, segment] = fields[..] else {
                return Err(bad(format!("expected 4 fields, got {line:?}")));
            };
            let index: usize = index.parse().map_err(|_| bad("bad index".into()))?;
            let freq: u64 = freq.parse().map_err(|_| bad("bad frequency".into()))?;
            if index != i {
                return Err(bad(format!("index {index} out of order")));
            }
            if v.index.contains_key(token) {
                return Err(bad(format!("duplicate token {token}")));
            }
            let expected_special = i < NUM_SPECIAL;
            match segment {
                "special" if expected_special && token == SPECIAL_TOKENS[i] => {}
                "pretrained" if !expected_special && !saw_extension => {}
                "extension" if !expected_special => saw_extension = true,
                _ => return Err(bad(format!("segment {segment} invalid at index {i}"))),
            }
            v.push(token.to_string(), freq);
            if !saw_extension {
                v.pretrained_end = v.tokens.len();
            }
        }
        if v.tokens.len() < NUM_SPECIAL {
            return Err(Error::Vocabulary(format!(
                "{} lacks the special tokens",
                origin.display()
            )));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        Self::parse_lines(lines.iter().map(String::as_str), path)
    }
}

fn sort_by_frequency(counts: &BTreeMap<String, u64>) -> Vec<(String, u64)> {
    let mut items: Vec<(String, u64)> = counts.iter().map(|(t, &c)| (t.clone(), c)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items
}

/// Union of `v_hmr` and `v_lmr`: every `v_hmr` entry keeps its index, and
/// tokens only in `v_lmr` are appended as the extension segment ordered by
/// (`v_lmr` frequency descending, token ascending).
pub fn extend_vocabulary(v_hmr: &Vocabulary, v_lmr: &Vocabulary) -> Result<(Vocabulary, ExtensionReport)> {
    for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
        if v_hmr.tokens.get(i).map(String::as_str) != Some(t)
            || v_lmr.tokens.get(i).map(String::as_str) != Some(t)
        {
            return Err(Error::Vocabulary("vocabularies disagree on the special layout".into()));
        }
    }
    let mut out = v_hmr.clone();
    out.pretrained_end = v_hmr.len();
    let mut new_counts = BTreeMap::new();
    let mut overlap = 0;
    for (t, &f) in v_lmr.tokens.iter().zip(&v_lmr.frequency).skip(NUM_SPECIAL) {
        if v_hmr.contains(t) {
            overlap += 1;
        } else {
            new_counts.insert(t.clone(), f);
        }
    }
    for (t, f) in sort_by_frequency(&new_counts) {
        out.push(t, f);
    }
    let report = ExtensionReport::from_counts(v_hmr.non_special_len(), v_lmr.non_special_len(), overlap)?;
    debug_assert_eq!(report.new_items, out.len() - v_hmr.len());
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(tokens: &[(&str, u64)]) -> Vocabulary {
        Vocabulary::from_counts(&tokens.iter().map(|(t, c)| (t.to_string(), *c)).collect())
    }

    #[test]
    fn specials_layout() {
        let v = Vocabulary::specials();
        assert_eq!(v.get("<pad>"), Some(PAD));
        assert_eq!(v.get("<unk>"), Some(UNK));
        assert_eq!(v.get("<s>"), Some(BOS));
        assert_eq!(v.get("</s>"), Some(EOS));
        assert_eq!(v.get("<mask>"), Some(MASK));
    }

    #[test]
    fn ordering_rule() {
        let v = vocab(&[("b", 3), ("a", 3), ("c", 9)]);
        assert_eq!(&v.tokens()[5..], ["c", "a", "b"]);
    }

    #[test]
    fn subset_extension_is_identity() {
        let h = vocab(&[("a", 3), ("b", 2), ("c", 1)]);
        let l = vocab(&[("b", 7)]);
        let (out, rep) = extend_vocabulary(&h, &l).unwrap();
        assert_eq!(rep.new_items, 0);
        assert_eq!(out.tokens(), h.tokens());
    }

    #[test]
    fn disjoint_extension() {
        let h = vocab(&[("a", 3), ("b", 2)]);
        let l = vocab(&[("x", 1), ("y", 5), ("z", 5)]);
        let (out, rep) = extend_vocabulary(&h, &l).unwrap();
        assert_eq!(rep.new_items, 3);
        assert_eq!(out.non_special_len(), 5);
        assert_eq!(&out.tokens()[7..], ["y", "z", "x"]);
        assert_eq!(out.segment(6), Segment::Pretrained);
        assert_eq!(out.segment(7), Segment::Extension);
    }

    #[test]
    fn author_response_arithmetic() {
        let r = ExtensionReport::from_counts(59009, 40583, 21606).unwrap();
        assert_eq!(r.new_items, 18977);
    }

    #[test]
    fn file_round_trip() {
        let h = vocab(&[("a", 3), ("b", 2)]);
        let l = vocab(&[("x", 1), ("a", 5)]);
        let (v, _) = extend_vocabulary(&h, &l).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), v.to_text());
    }

    #[test]
    fn malformed_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        std::fs::write(&p, "<pad> 0 0 special\n<unk> 2 0 special\n").unwrap();
        assert!(matches!(Vocabulary::load(&p), Err(Error::Parse { .. })));
    }

    fn arb_vocab() -> impl Strategy<Value = Vocabulary> {
        prop::collection::btree_map("[a-h]{1,3}", 1u64..50, 0..40)
            .prop_map(|m| Vocabulary::from_counts(&m))
    }

    proptest! {
        #[test]
        fn extension_keeps_indices_and_counts(h in arb_vocab(), l in arb_vocab()) {
            let (out, rep) = extend_vocabulary(&h, &l).unwrap();
            for (i, t) in h.tokens().iter().enumerate() {
                prop_assert_eq!(out.get(t), Some(i as u32));
            }
            prop_assert_eq!(rep.new_items, rep.size_lmr - rep.overlap);
            prop_assert!(rep.overlap <= rep.size_hmr.min(rep.size_lmr));
            prop_assert_eq!(out.len(), h.len() + rep.new_items);
            for i in h.len()..out.len() {
                prop_assert!(out.segment(i as u32) == Segment::Extension);
            }
        }
    }
}
