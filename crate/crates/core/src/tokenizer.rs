//! Subword vocabulary learned by pair merging, with greedy longest-match
//! encoding that records where each whitespace-delimited word begins.
//!
//! Word-internal pieces carry a `##` prefix, so the same characters have a
//! distinct id at the start of a word and inside it. This is what lets
//! [`decode`] restore word boundaries and lets the masking code group the
//! pieces of one word together.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "##";

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const NUM_SPECIALS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl SpecialIds {
    pub fn all(&self) -> [usize; NUM_SPECIALS] {
        [self.pad, self.unk, self.cls, self.sep, self.mask]
    }

    pub fn contains(&self, id: usize) -> bool {
        self.all().contains(&id)
    }

    /// Structural tokens that never carry an MLM label. `UNK` stands in for
    /// real text and stays maskable.
    pub fn is_structural(&self, id: usize) -> bool {
        id == self.pad || id == self.cls || id == self.sep || id == self.mask
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    specials: SpecialIds,
    max_token_chars: usize,
}

/// On-disk form: ids are positions in `tokens`.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: SpecialNames,
}

#[derive(Serialize, Deserialize)]
struct SpecialNames {
    pad: String,
    unk: String,
    cls: String,
    sep: String,
    mask: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub word_begin: Vec<bool>,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list; the five special
    /// tokens must be present exactly once.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        Self::with_special_names(tokens, [PAD, UNK, CLS, SEP, MASK])
    }

    fn with_special_names(tokens: Vec<String>, names: [&str; NUM_SPECIALS]) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let lookup = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::Data(format!("special token `{name}` missing from vocabulary")))
        };
        let specials = SpecialIds {
            pad: lookup(names[0])?,
            unk: lookup(names[1])?,
            cls: lookup(names[2])?,
            sep: lookup(names[3])?,
            mask: lookup(names[4])?,
        };
        let distinct: BTreeSet<usize> = specials.all().into_iter().collect();
        if distinct.len() != NUM_SPECIALS {
            return Err(Error::Data("special tokens must be distinct".into()));
        }
        let max_token_chars = tokens
            .iter()
            .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            tokens,
            token_to_id,
            specials,
            max_token_chars,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.size() })
    }

    /// Ids that random replacement may draw from.
    pub fn non_special_ids(&self) -> Vec<usize> {
        (0..self.size()).filter(|&i| !self.specials.contains(i)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let s = self.specials;
        let file = VocabFile {
            tokens: self.tokens.clone(),
            specials: SpecialNames {
                pad: self.tokens[s.pad].clone(),
                unk: self.tokens[s.unk].clone(),
                cls: self.tokens[s.cls].clone(),
                sep: self.tokens[s.sep].clone(),
                mask: self.tokens[s.mask].clone(),
            },
        };
        let mut out = serde_json::to_string_pretty(&file)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let sp = &file.specials;
        let names = [
            sp.pad.clone(),
            sp.unk.clone(),
            sp.cls.clone(),
            sp.sep.clone(),
            sp.mask.clone(),
        ];
        Self::with_special_names(file.tokens, names.each_ref().map(String::as_str))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Splits a word into initial/continuation character symbols.
fn char_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
        .collect()
}

fn merge_symbols(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

/// Number of base symbols (a character in word-initial or word-internal
/// position) occurring in `corpus`; the smallest legal vocabulary is this
/// plus the five specials.
pub fn base_alphabet<S: AsRef<str>>(corpus: &[S]) -> BTreeSet<String> {
    corpus
        .iter()
        .flat_map(|d| d.as_ref().split_whitespace().map(char_symbols).collect::<Vec<_>>())
        .flatten()
        .collect()
}

/// Learns a vocabulary by repeatedly merging the most frequent adjacent
/// symbol pair (ties broken by the lexicographically smallest pair) until
/// `target_size` tokens exist or no pair occurs at least twice.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        for w in doc.as_ref().split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let alphabet = base_alphabet(corpus);
    let minimum = NUM_SPECIALS + alphabet.len();
    if target_size < minimum {
        return Err(Error::VocabTooSmall {
            target: target_size,
            minimum,
        });
    }

    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    let mut words: Vec<(Vec<String>, usize)> = word_counts.iter().map(|(w, &c)| (char_symbols(w), c)).collect();

    while tokens.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, count) in &words {
            for pair in syms.windows(2) {
                *pairs.entry((&pair[0], &pair[1])).or_default() += count;
            }
        }
        // BTreeMap iterates in lexicographic order, so keeping the first
        // strict maximum implements the tie rule.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &count) in &pairs {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        let merged = merge_symbols(&left, &right);
        for (syms, _) in &mut words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocabulary::from_tokens(tokens)
}

/// Collapses whitespace runs and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Greedy longest-match segmentation of each whitespace-delimited word.
/// A run of characters that no vocabulary piece covers becomes one `UNK`.
pub fn encode(vocab: &Vocabulary, text: &str) -> EncodedText {
    let mut out = EncodedText::default();
    let mut piece = String::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut pos = 0;
        let mut first = true;
        let mut last_was_unk = false;
        while pos < chars.len() {
            let longest = vocab.max_token_chars.min(chars.len() - pos);
            let mut matched = None;
            for len in (1..=longest).rev() {
                piece.clear();
                if pos > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&chars[pos..pos + len]);
                if let Some(id) = vocab.id(&piece) {
                    if !vocab.specials.contains(id) {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.ids.push(id);
                    out.word_begin.push(first);
                    pos += len;
                    last_was_unk = false;
                }
                None => {
                    if !last_was_unk {
                        out.ids.push(vocab.specials.unk);
                        out.word_begin.push(first);
                    }
                    pos += 1;
                    last_was_unk = true;
                }
            }
            first = false;
        }
    }
    out
}

/// Joins pieces back into whitespace-separated words; special tokens are dropped.
pub fn decode(vocab: &Vocabulary, ids: &[usize]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if vocab.specials.contains(id) {
            continue;
        }
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) => out.push_str(rest),
            None => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}

/// Fraction of encoded tokens over `corpus` that are not `UNK`.
pub fn coverage<S: AsRef<str>>(vocab: &Vocabulary, corpus: &[S]) -> f64 {
    let (mut total, mut known) = (0usize, 0usize);
    for doc in corpus {
        let enc = encode(vocab, doc.as_ref());
        total += enc.len();
        known += enc.ids.iter().filter(|&&i| i != vocab.specials.unk).count();
    }
    if total == 0 {
        1.0
    } else {
        known as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// All segmentations of `word` into vocabulary pieces, by exhaustive search.
    fn all_segmentations(vocab: &Vocabulary, chars: &[char], pos: usize) -> Vec<Vec<usize>> {
        if pos == chars.len() {
            return vec![vec![]];
        }
        let mut found = Vec::new();
        for end in pos + 1..=chars.len() {
            let s: String = chars[pos..end].iter().collect();
            let key = if pos == 0 { s } else { format!("##{s}") };
            if let Some(id) = vocab.id(&key) {
                for mut rest in all_segmentations(vocab, chars, end) {
                    rest.insert(0, id);
                    found.push(rest);
                }
            }
        }
        found
    }

    fn piece_len(vocab: &Vocabulary, id: usize) -> usize {
        let t = vocab.token(id).unwrap();
        t.strip_prefix("##").unwrap_or(t).chars().count()
    }

    #[test]
    fn merges_the_most_frequent_pair() {
        let corpus = vec!["ab"; 10];
        // Brute-force pair count: ("a", "##b") occurs 10 times, nothing else.
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for doc in &corpus {
            for w in doc.split_whitespace() {
                let syms = char_symbols(w);
                for p in syms.windows(2) {
                    *counts.entry((p[0].clone(), p[1].clone())).or_default() += 1;
                }
            }
        }
        let (top, n) = counts.iter().max_by_key(|(_, c)| **c).unwrap();
        assert_eq!((top.0.as_str(), top.1.as_str(), *n), ("a", "##b", 10));

        let v = train_vocab(&corpus, NUM_SPECIALS + 3).unwrap();
        assert_eq!(v.size(), NUM_SPECIALS + 3);
        assert!(v.id("ab").is_some());
    }

    #[test]
    fn minimum_size_is_character_level() {
        let corpus = ["hello world", "low yellow"];
        let minimum = NUM_SPECIALS + base_alphabet(&corpus).len();
        let v = train_vocab(&corpus, minimum).unwrap();
        assert_eq!(v.size(), minimum);
        assert!(v.tokens()[NUM_SPECIALS..].iter().all(|t| t.trim_start_matches("##").chars().count() == 1));
        match train_vocab(&corpus, minimum - 1) {
            Err(Error::VocabTooSmall { minimum: m, .. }) => assert_eq!(m, minimum),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let v = train_vocab(&["abc"], 100).unwrap();
        assert_eq!(v.size(), NUM_SPECIALS + 3);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the hat is flat", "that cat"];
        let a = train_vocab(&corpus, 40).unwrap();
        let b = train_vocab(&corpus, 40).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(train_vocab::<&str>(&[], 10), Err(Error::EmptyCorpus)));
        assert!(matches!(train_vocab(&["  \n "], 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn encode_edge_cases() {
        let v = train_vocab(&["aa bb aa"], 20).unwrap();
        assert!(encode(&v, "").is_empty());
        let e = encode(&v, "z");
        assert_eq!(e.ids, vec![v.specials().unk]);
        assert_eq!(e.word_begin, vec![true]);
        // a run of unknown characters collapses into one UNK
        let e = encode(&v, "azzz");
        assert_eq!(e.ids, vec![v.id("a").unwrap(), v.specials().unk]);
        assert_eq!(e.word_begin, vec![true, false]);
    }

    #[test]
    fn decode_edge_cases() {
        let v = train_vocab(&["aa bb aa"], 20).unwrap();
        let s = v.specials();
        assert_eq!(decode(&v, &[]).unwrap(), "");
        assert_eq!(decode(&v, &[s.cls, s.sep]).unwrap(), "");
        assert_eq!(decode(&v, &encode(&v, "aa bb").ids).unwrap(), "aa bb");
        assert!(matches!(decode(&v, &[v.size()]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        let v = train_vocab(&["lorem ipsum dolor sit amet", "ipsum lorem"], 30).unwrap();
        let json = v.to_json().unwrap();
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn from_tokens_rejects_duplicates_and_missing_specials() {
        let mut toks: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        toks.push("a".into());
        assert!(Vocabulary::from_tokens(toks.clone()).is_ok());
        toks.push("a".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    fn word_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(vec!['a', 'b', 'c', 'd', 'e']), 1..7)
            .prop_map(|cs| cs.into_iter().collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_greedy_matches_brute_force(
            words in proptest::collection::vec(word_strategy(), 1..40),
            extra in 0usize..40,
        ) {
            let text = words.join(" ");
            let corpus = [text.as_str()];
            let size = NUM_SPECIALS + base_alphabet(&corpus).len() + extra;
            let v = train_vocab(&corpus, size).unwrap();
            let enc = encode(&v, &text);

            prop_assert_eq!(decode(&v, &enc.ids).unwrap(), normalize_whitespace(&text));
            prop_assert!(enc.ids.iter().all(|&i| !v.specials().contains(i)));

            // Reconstruct words from word_begin runs and compare with the
            // whitespace split; each word's greedy segmentation must be the
            // exhaustive search's longest-first segmentation.
            let mut starts: Vec<usize> = enc.word_begin.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
            prop_assert_eq!(starts.len(), words.len());
            starts.push(enc.len());
            for (w, span) in words.iter().zip(starts.windows(2)) {
                let ids = &enc.ids[span[0]..span[1]];
                prop_assert_eq!(decode(&v, ids).unwrap(), w.clone());
                let chars: Vec<char> = w.chars().collect();
                let oracle = all_segmentations(&v, &chars, 0)
                    .into_iter()
                    .max_by(|a, b| {
                        let la: Vec<usize> = a.iter().map(|&i| piece_len(&v, i)).collect();
                        let lb: Vec<usize> = b.iter().map(|&i| piece_len(&v, i)).collect();
                        la.cmp(&lb)
                    })
                    .unwrap();
                prop_assert_eq!(ids.to_vec(), oracle);
            }
        }
    }
}
