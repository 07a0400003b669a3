//! Byte-pair-encoding sub-word vocabularies trained on pooled transcripts.
//!
//! Words are split into characters with the word-boundary marker fused onto
//! the first character (`▁a`, `b`, `c`), so merges never cross word
//! boundaries and decoding recovers spaces from the markers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthcorpus::Manifest;

pub const BOUNDARY: char = '▁';
pub const BLANK: &str = "<blank>";
pub const UNK: &str = "<unk>";
pub const BLANK_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Token inventory plus the ordered merge list that built it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
}

/// Symbols of one word before any merge.
fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                format!("{BOUNDARY}{c}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn is_base(token: &str) -> bool {
    token.strip_prefix(BOUNDARY).unwrap_or(token).chars().count() == 1
}

/// Merges every non-overlapping `left right` occurrence, scanning left to right.
pub fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
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

/// All transcripts of the given manifests, one per line, in iteration order.
pub fn pool_transcripts<'a>(manifests: impl IntoIterator<Item = &'a Manifest>) -> String {
    let mut corpus = String::new();
    for m in manifests {
        for r in m.records() {
            corpus.push_str(&r.transcript);
            corpus.push('\n');
        }
    }
    corpus
}

/// Distinct word-boundary-aware base symbols of `corpus`, sorted: every
/// character appears both plain and with the boundary marker.
pub fn base_symbols(corpus: &str) -> Vec<String> {
    let mut chars: Vec<char> = corpus.chars().filter(|c| !c.is_whitespace()).collect();
    chars.sort_unstable();
    chars.dedup();
    let mut symbols: Vec<String> = chars
        .iter()
        .flat_map(|&c| [c.to_string(), format!("{BOUNDARY}{c}")])
        .collect();
    symbols.sort();
    symbols
}

struct Interner {
    strings: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.strings.len() as u32;
        self.strings.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }
}

fn add_pairs(counts: &mut HashMap<(u32, u32), usize>, word: &[u32], freq: usize) {
    for w in word.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += freq;
    }
}

fn remove_pairs(counts: &mut HashMap<(u32, u32), usize>, word: &[u32], freq: usize) {
    for w in word.windows(2) {
        let key = (w[0], w[1]);
        let c = counts.get_mut(&key).expect("pair count present");
        *c -= freq;
        if *c == 0 {
            counts.remove(&key);
        }
    }
}

/// Trains a BPE vocabulary of at most `vocab_size` tokens (blank and unknown
/// included). Each round merges the most frequent adjacent pair, breaking
/// ties by the lexicographically smallest `(left, right)`; training stops
/// when the budget is reached or no pair occurs at least twice.
pub fn train_bpe(corpus: &str, vocab_size: usize) -> Result<Vocab> {
    let base = base_symbols(corpus);
    if base.is_empty() {
        return Err(Error::Training("empty corpus".into()));
    }
    let mut tokens: Vec<String> = vec![BLANK.into(), UNK.into()];
    tokens.extend(base.iter().cloned());
    if vocab_size < tokens.len() {
        return Err(Error::Training(format!(
            "vocab size {vocab_size} is below the base inventory of {} symbols",
            tokens.len()
        )));
    }

    let mut interner = Interner {
        strings: Vec::new(),
        ids: HashMap::new(),
    };
    let mut word_freq: HashMap<&str, usize> = HashMap::new();
    for w in corpus.split_whitespace() {
        *word_freq.entry(w).or_insert(0) += 1;
    }
    let mut word_types: Vec<(&str, usize)> = word_freq.into_iter().collect();
    word_types.sort_unstable();
    let mut words: Vec<(Vec<u32>, usize)> = word_types
        .into_iter()
        .map(|(w, f)| {
            let ids = initial_symbols(w).iter().map(|s| interner.intern(s)).collect();
            (ids, f)
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
    for (w, f) in &words {
        add_pairs(&mut pair_counts, w, *f);
    }

    let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let best = pair_counts.iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let a = (&interner.strings[pa.0 as usize], &interner.strings[pa.1 as usize]);
                let b = (&interner.strings[pb.0 as usize], &interner.strings[pb.1 as usize]);
                b.cmp(&a)
            })
        });
        let Some((&(l, r), &count)) = best else { break };
        if count < 2 {
            break;
        }
        let left = interner.strings[l as usize].clone();
        let right = interner.strings[r as usize].clone();
        let merged = interner.intern(&format!("{left}{right}"));
        for (word, freq) in words.iter_mut() {
            if !word.windows(2).any(|p| p[0] == l && p[1] == r) {
                continue;
            }
            remove_pairs(&mut pair_counts, word, *freq);
            let mut out = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == l && word[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(word[i]);
                    i += 1;
                }
            }
            *word = out;
            add_pairs(&mut pair_counts, word, *freq);
        }
        let merged_str = format!("{left}{right}");
        if known.insert(merged_str.clone()) {
            tokens.push(merged_str);
        }
        merges.push((left, right));
    }
    Vocab::from_parts(tokens, merges)
}

impl Vocab {
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(BLANK) || tokens.get(1).map(String::as_str) != Some(UNK) {
            return Err(Error::Vocab(format!("tokens must start with {BLANK} and {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token `{t}`")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        let mut available: std::collections::HashSet<&str> = tokens
            .iter()
            .enumerate()
            .filter(|(i, t)| *i < 2 || is_base(t))
            .map(|(_, t)| t.as_str())
            .collect();
        for (k, (l, r)) in merges.iter().enumerate() {
            if !available.contains(l.as_str()) || !available.contains(r.as_str()) {
                return Err(Error::Vocab(format!(
                    "merge {k} `{l} {r}` uses a token not yet created"
                )));
            }
            let merged = format!("{l}{r}");
            let Some(&mi) = index.get(&merged) else {
                return Err(Error::Vocab(format!("merge {k} result `{merged}` is not a token")));
            };
            available.insert(tokens[mi as usize].as_str());
        }
        Ok(Vocab {
            tokens,
            merges,
            index,
        })
    }

    /// Number of tokens including blank.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of labels the model must predict, excluding blank.
    pub fn label_count(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Base symbols: single characters, with or without the boundary marker.
    pub fn base_symbols(&self) -> Vec<&str> {
        self.tokens[2..].iter().filter(|t| is_base(t)).map(String::as_str).collect()
    }

    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut symbols: Vec<String> = initial_symbols(word)
            .into_iter()
            .map(|s| if self.index.contains_key(&s) { s } else { UNK.to_string() })
            .collect();
        for (l, r) in &self.merges {
            if symbols.len() < 2 {
                break;
            }
            apply_merge(&mut symbols, l, r);
        }
        symbols.iter().map(|s| self.index[s]).collect()
    }

    /// Never emits the blank id; unknown characters become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id == BLANK_ID {
                return Err(Error::Decode("blank id in token sequence".into()));
            }
            let token = self
                .token(id)
                .ok_or_else(|| Error::Decode(format!("token id {id} out of range")))?;
            out.push_str(token);
        }
        Ok(out.replace(BOUNDARY, " ").trim().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("bpe-vocab v1 {}\n[tokens]\n", self.tokens.len());
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str("[merges]\n");
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let size: usize = header
            .strip_prefix("bpe-vocab v1 ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Vocab(format!("bad header `{header}`")))?;
        if lines.next() != Some("[tokens]") {
            return Err(Error::Vocab("missing [tokens] section".into()));
        }
        let mut tokens = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for line in lines {
            if !in_merges && line == "[merges]" {
                in_merges = true;
            } else if in_merges {
                let (l, r) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Vocab(format!("bad merge line `{line}`")))?;
                merges.push((l.to_string(), r.to_string()));
            } else {
                tokens.push(line.to_string());
            }
        }
        if !in_merges {
            return Err(Error::Vocab("missing [merges] section".into()));
        }
        if tokens.len() != size {
            return Err(Error::Vocab(format!("header says {size} tokens, found {}", tokens.len())));
        }
        Vocab::from_parts(tokens, merges)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_character_corpus_has_no_merges() {
        let v = train_bpe("a\n", 10).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.tokens(), &[BLANK, UNK, "a", "▁a"]);
    }

    #[test]
    fn exact_base_budget_means_zero_merges() {
        let corpus = "ab ab ab\n";
        let base = base_symbols(corpus).len();
        let v = train_bpe(corpus, base + 2).unwrap();
        assert!(v.merges().is_empty());
        assert!(train_bpe(corpus, base + 1).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(train_bpe("", 10), Err(Error::Training(_))));
        assert!(matches!(train_bpe(" \n ", 10), Err(Error::Training(_))));
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // Words "abab" x2: pairs (▁a,b)=2, (b,a)=2, (a,b)=2. Tie goes to the
        // lexicographically smallest pair, which is ("a", "b").
        let v = train_bpe("abab abab", 100).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn merged_surface_string_encodes_to_one_token() {
        let v = train_bpe("ab ab ab\n", 100).unwrap();
        assert_eq!(v.merges()[0], ("▁a".to_string(), "b".to_string()));
        let ids = v.encode("ab");
        assert_eq!(ids, vec![v.id("▁ab").unwrap()]);
    }

    #[test]
    fn encode_decode_basics() {
        let v = train_bpe("ab cd ab cd abcd\n", 30).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&v.encode("ab cd")).unwrap(), "ab cd");
        assert_eq!(v.decode(&[]).unwrap(), "");
        let two = [v.id("▁ab").unwrap(), v.id("▁cd").unwrap()];
        assert_eq!(v.decode(&two).unwrap(), "ab cd");
        assert!(v.decode(&[BLANK_ID]).is_err());
        assert!(v.decode(&[v.size() as u32]).is_err());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let v = train_bpe("ab ba\n", 20).unwrap();
        let ids = v.encode("azb");
        assert!(ids.contains(&UNK_ID));
        assert!(!ids.contains(&BLANK_ID));
    }

    #[test]
    fn text_round_trip() {
        let v = train_bpe("abc abd bcd\nabc\n", 20).unwrap();
        let text = v.to_text();
        assert!(text.starts_with(&format!("bpe-vocab v1 {}\n[tokens]\n<blank>\n", v.size())));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        assert!(Vocab::from_text("bpe-vocab v1 3\n[tokens]\n<blank>\n").is_err());
    }

    #[test]
    fn merges_referencing_later_tokens_are_rejected() {
        let tokens: Vec<String> = [BLANK, UNK, "a", "▁a", "aa", "▁aaa"].map(String::from).to_vec();
        let merges = vec![
            ("▁a".to_string(), "aa".to_string()),
            ("a".to_string(), "a".to_string()),
        ];
        assert!(Vocab::from_parts(tokens, merges).is_err());
    }
}
