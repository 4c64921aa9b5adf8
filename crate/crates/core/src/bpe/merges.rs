use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::corpus::{read_lines, write_text};
use crate::error::{Error, Result};

/// Marker appended to the final symbol of a word during learning/application.
pub const END_OF_WORD: &str = "</w>";
/// Continuation marker on every non-final emitted subword.
pub const CONTINUATION: &str = "@@";

/// Ordered BPE merges (learning order, most frequent first).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut t = MergeTable::new();
        for (l, r) in pairs {
            t.push(l, r)?;
        }
        Ok(t)
    }

    fn push(&mut self, left: String, right: String) -> Result<()> {
        let key = (left, right);
        if self.ranks.contains_key(&key) {
            return Err(Error::Config(format!("duplicate merge {} {}", key.0, key.1)));
        }
        self.ranks.insert(key.clone(), self.merges.len());
        self.merges.push(key);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    /// One merge per line, `left right`, in learning order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut t = MergeTable::new();
        for (i, line) in read_lines(path)?.into_iter().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    t.push(l.to_string(), r.to_string()).map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })?
                }
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("expected `left right`, got {line:?}"),
                    })
                }
            }
        }
        Ok(t)
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

/// Merges every non-overlapping occurrence of `(left, right)`, scanning left
/// to right.
fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns up to `num_merges` merges. Each round merges the most frequent
/// adjacent pair (weighted by word count); ties go to the lexicographically
/// smallest `(left, right)`. Stops early when no pair remains.
pub fn learn_bpe(word_freqs: &BTreeMap<String, u64>, num_merges: usize) -> MergeTable {
    let mut words: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .filter(|(w, &c)| !w.is_empty() && c > 0)
        .map(|(w, &c)| (initial_symbols(w), c))
        .collect();
    let mut table = MergeTable::new();
    for _ in 0..num_merges {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, c) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += c;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (symbols, _) in &mut words {
            merge_pair(symbols, &l, &r);
        }
        table
            .push(l, r)
            .expect("a merged pair cannot reappear as a pair of the same symbols");
    }
    table
}

/// Segments one word: merges are applied lowest-rank first until none
/// applies, `</w>` is stripped and `@@` marks every non-final piece.
pub fn apply_bpe(merges: &MergeTable, word: &str) -> Vec<String> {
    let mut symbols = initial_symbols(word);
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|p| merges.rank(&p[0], &p[1]))
            .min();
        let Some(rank) = best else { break };
        let (l, r) = merges.merges[rank].clone();
        merge_pair(&mut symbols, &l, &r);
    }
    let n = symbols.len();
    symbols
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            if i + 1 == n {
                if let Some(stripped) = s.strip_suffix(END_OF_WORD) {
                    s = stripped.to_string();
                }
            } else {
                s.push_str(CONTINUATION);
            }
            s
        })
        .collect()
}
