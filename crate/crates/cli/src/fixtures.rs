//! Seeded synthetic data: two text domains with disjoint content lexicons,
//! a labeled dataset in the second domain, and a small separable dataset.

use std::path::{Path, PathBuf};

use dapt_core::corpus::{write_csv, write_jsonl, Document};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

const FUNCTION_WORDS: [&str; 8] = ["the", "a", "of", "in", "with", "and", "near", "from"];
const SYLLABLES_A: [&str; 8] = ["ka", "ri", "to", "me", "su", "na", "lo", "pe"];
const SYLLABLES_B: [&str; 8] = ["zor", "vex", "qua", "dri", "plo", "gux", "thy", "bre"];
const MARKERS: [[&str; 2]; 2] = [["amber", "cobalt"], ["granite", "marble"]];
const FILLER: [&str; 4] = ["note", "item", "page", "line"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

/// Content words of one domain: nouns, verbs and adjectives built from
/// the domain's syllables, so no content word is shared across domains.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
}

impl Lexicon {
    pub fn of(domain: Domain) -> Self {
        let s = match domain {
            Domain::A => SYLLABLES_A,
            Domain::B => SYLLABLES_B,
        };
        let pairs: Vec<String> = (0..s.len())
            .flat_map(|i| (0..s.len()).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| format!("{}{}", s[i], s[j]))
            .collect();
        // Stride through the pairs so each part of speech mixes all syllables.
        let pick = |offset: usize, n: usize, suffix: &str| -> Vec<String> {
            (0..n).map(|k| format!("{}{suffix}", pairs[(offset + 5 * k) % pairs.len()])).collect()
        };
        Self { nouns: pick(0, 16, ""), verbs: pick(3, 8, "s"), adjectives: pick(5, 8, "ic") }
    }
}

/// One sentence: `det adj noun verb prep det noun`. The verb follows the
/// subject noun with probability 0.7, which gives the text learnable structure.
fn sentence(lex: &Lexicon, nouns: &[usize], rng: &mut ChaCha8Rng) -> String {
    let det = |rng: &mut ChaCha8Rng| FUNCTION_WORDS[rng.random_range(0..2)];
    let subj = nouns[rng.random_range(0..nouns.len())];
    let obj = nouns[rng.random_range(0..nouns.len())];
    let verb = if rng.random_bool(0.7) { subj % lex.verbs.len() } else { rng.random_range(0..lex.verbs.len()) };
    let adj = (subj + rng.random_range(0..2)) % lex.adjectives.len();
    let prep = FUNCTION_WORDS[rng.random_range(2..FUNCTION_WORDS.len())];
    format!(
        "{} {} {} {} {prep} {} {}",
        det(rng),
        lex.adjectives[adj],
        lex.nouns[subj],
        lex.verbs[verb],
        det(rng),
        lex.nouns[obj]
    )
}

fn paragraph(lex: &Lexicon, nouns: &[usize], rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..7);
    (0..n).map(|_| sentence(lex, nouns, rng)).collect::<Vec<_>>().join(" ")
}

pub fn domain_corpus(domain: Domain, docs: usize, seed: u64) -> Vec<Document> {
    let lex = Lexicon::of(domain);
    let all: Vec<usize> = (0..lex.nouns.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64 + 1);
    (0..docs)
        .map(|_| Document::new(&paragraph(&lex, &all, &mut rng)).expect("generated text is non-empty"))
        .collect()
}

/// Domain-B documents whose nouns come mostly (80%) from a label-specific half
/// of the noun list; labels alternate before a seeded shuffle.
pub fn labeled_domain_dataset(docs: usize, seed: u64) -> Vec<Document> {
    let lex = Lexicon::of(Domain::B);
    let half = lex.nouns.len() / 2;
    let pools: [Vec<usize>; 2] = [(0..half).collect(), (half..lex.nouns.len()).collect()];
    let all: Vec<usize> = (0..lex.nouns.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut out: Vec<Document> = (0..docs)
        .map(|i| {
            let label = (i % 2) as u8;
            let n = rng.random_range(2..5);
            let text = (0..n)
                .map(|_| {
                    let pool = if rng.random_bool(0.8) { &pools[label as usize] } else { &all };
                    sentence(&lex, pool, &mut rng)
                })
                .collect::<Vec<_>>()
                .join(" ");
            Document::labeled(&text, label).expect("generated text is non-empty")
        })
        .collect();
    out.shuffle(&mut rng);
    out
}

/// Each document holds three marker words of its class among two to five
/// shared filler words. Any single marker decides the label, and markers
/// carry most of each document's TF-IDF mass.
pub fn separable_dataset(docs: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    (0..docs)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut words: Vec<&str> = (0..rng.random_range(2..6)).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
            for _ in 0..3 {
                let m = MARKERS[label as usize][rng.random_range(0..2)];
                let at = rng.random_range(0..=words.len());
                words.insert(at, m);
            }
            Document::labeled(&words.join(" "), label).expect("generated text is non-empty")
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSizes {
    pub domain_docs: usize,
    pub labeled_docs: usize,
    pub separable_docs: usize,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        Self { domain_docs: 300, labeled_docs: 200, separable_docs: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureFiles {
    pub domain_a: PathBuf,
    pub domain_b: PathBuf,
    pub labeled: PathBuf,
    pub separable: PathBuf,
}

impl FixtureFiles {
    pub fn names() -> [&'static str; 4] {
        ["domain_a.jsonl", "domain_b.jsonl", "labeled_b.csv", "separable.csv"]
    }
}

pub fn generate(dir: &Path, sizes: FixtureSizes, seed: u64) -> CliResult<FixtureFiles> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::CliError::io(dir, e))?;
    let [a, b, l, s] = FixtureFiles::names().map(|n| dir.join(n));
    write_jsonl(&a, &domain_corpus(Domain::A, sizes.domain_docs, seed))?;
    write_jsonl(&b, &domain_corpus(Domain::B, sizes.domain_docs, seed))?;
    write_csv(&l, &labeled_domain_dataset(sizes.labeled_docs, seed))?;
    write_csv(&s, &separable_dataset(sizes.separable_docs, seed))?;
    Ok(FixtureFiles { domain_a: a, domain_b: b, labeled: l, separable: s })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn words(docs: &[Document]) -> HashSet<String> {
        docs.iter().flat_map(|d| d.text.split(' ').map(str::to_string).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn domains_share_only_function_words() {
        let a = words(&domain_corpus(Domain::A, 50, 1));
        let b = words(&domain_corpus(Domain::B, 50, 1));
        let shared: HashSet<&str> = a.intersection(&b).map(String::as_str).collect();
        assert!(shared.iter().all(|w| FUNCTION_WORDS.contains(w)), "{shared:?}");
    }

    #[test]
    fn lexicon_words_are_distinct() {
        for d in [Domain::A, Domain::B] {
            let l = Lexicon::of(d);
            let all: Vec<&String> = l.nouns.iter().chain(&l.verbs).chain(&l.adjectives).collect();
            assert_eq!(all.iter().collect::<HashSet<_>>().len(), all.len());
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(labeled_domain_dataset(20, 5), labeled_domain_dataset(20, 5));
        assert_ne!(labeled_domain_dataset(20, 5), labeled_domain_dataset(20, 6));
    }

    #[test]
    fn separable_markers_decide_the_label() {
        for d in separable_dataset(64, 2) {
            let label = d.label.unwrap() as usize;
            assert!(MARKERS[label].iter().any(|m| d.text.split(' ').any(|w| w == *m)));
            assert!(!MARKERS[1 - label].iter().any(|m| d.text.split(' ').any(|w| w == *m)));
        }
    }

    #[test]
    fn labeled_dataset_is_balanced() {
        let d = labeled_domain_dataset(40, 1);
        assert_eq!(d.iter().filter(|d| d.label == Some(1)).count(), 20);
    }
}
