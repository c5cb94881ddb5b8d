//! MLM batch construction with dynamic token-level or whole-word masking.
//!
//! Random draws per example, in order:
//! 1. one `f64` deciding the mode (`< p_wwm` → whole-word);
//! 2. selection: token mode draws one `f64` per candidate position in
//!    ascending order; whole-word mode shuffles the word list once;
//! 3. replacement: per selected position in ascending order, one `f64`
//!    picks mask/random/keep, and random replacement draws one extra
//!    index into the non-special ids.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

/// Label value for positions that do not contribute to the MLM loss.
pub const IGNORE: i64 = -100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub p_mask: f64,
    pub p_wwm: f64,
    /// Fractions of selected positions that become MASK, a random id, or stay.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_mask: 0.15,
            p_wwm: 0.2,
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        // p_mask = 0 is accepted: it disables masking entirely.
        if !(0.0..1.0).contains(&self.p_mask) {
            return Err(Error::Config(format!("p_mask must lie in [0, 1), got {}", self.p_mask)));
        }
        if !(0.0..=1.0).contains(&self.p_wwm) {
            return Err(Error::Config(format!("p_wwm must lie in [0, 1], got {}", self.p_wwm)));
        }
        if self.split.iter().any(|s| *s < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "replacement split must be non-negative and sum to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq: usize,
    /// Row-major `[batch × seq]` ids after corruption.
    pub input_ids: Vec<usize>,
    /// Row-major `[batch × seq]`: original id at selected positions, [`IGNORE`] elsewhere.
    pub labels: Vec<i64>,
    pub wwm_flags: Vec<bool>,
}

impl MaskedBatch {
    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Flat positions and target ids of every labeled position.
    pub fn targets(&self) -> (Vec<usize>, Vec<usize>) {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, &l)| (i, l as usize))
            .unzip()
    }
}

/// Per-batch RNG: one ChaCha stream per batch index under a per-epoch key.
pub fn batch_rng(seed: u64, epoch: u64, batch_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(batch_index);
    rng
}

/// Groups maskable positions into words. A maskable position starts a new
/// word when it has `word_begin`, is the first position of the chunk, or
/// follows a non-maskable position.
pub fn word_spans(chunk: &Chunk, vocab: &Vocabulary) -> Vec<Vec<usize>> {
    let specials = vocab.specials();
    let mut words: Vec<Vec<usize>> = Vec::new();
    let mut prev_maskable = false;
    for (i, (&id, &begin)) in chunk.ids.iter().zip(&chunk.word_begin).enumerate() {
        let maskable = !specials.is_structural(id);
        if maskable {
            if begin || !prev_maskable {
                words.push(vec![i]);
            } else {
                words.last_mut().expect("open word").push(i);
            }
        }
        prev_maskable = maskable;
    }
    words
}

/// Picks positions to predict in one chunk. Returns the sorted positions
/// and whether whole-word mode was used.
pub fn select_positions<R: Rng + ?Sized>(
    chunk: &Chunk,
    cfg: &MaskingConfig,
    vocab: &Vocabulary,
    rng: &mut R,
) -> (Vec<usize>, bool) {
    let wwm = rng.random::<f64>() < cfg.p_wwm;
    let specials = vocab.specials();
    let mut selected = Vec::new();
    if wwm {
        let mut words = word_spans(chunk, vocab);
        let candidates: usize = words.iter().map(Vec::len).sum();
        words.shuffle(rng);
        let budget = cfg.p_mask * candidates as f64;
        for w in words {
            if selected.len() as f64 >= budget {
                break;
            }
            selected.extend(w);
        }
        selected.sort_unstable();
    } else {
        for (i, &id) in chunk.ids.iter().enumerate() {
            if !specials.is_structural(id) && rng.random::<f64>() < cfg.p_mask {
                selected.push(i);
            }
        }
    }
    (selected, wwm)
}

/// Applies the mask / random / keep rule to `selected` positions of `ids`
/// in place. Random ids are drawn uniformly from the non-special ids.
pub fn apply_replacement<R: Rng + ?Sized>(
    ids: &mut [usize],
    selected: &[usize],
    split: [f64; 3],
    vocab: &Vocabulary,
    replacement_pool: &[usize],
    rng: &mut R,
) {
    let mask = vocab.specials().mask;
    for &pos in selected {
        let u = rng.random::<f64>();
        if u < split[0] {
            ids[pos] = mask;
        } else if u < split[0] + split[1] {
            if !replacement_pool.is_empty() {
                ids[pos] = replacement_pool[rng.random_range(0..replacement_pool.len())];
            }
        }
    }
}

/// Builds one masked batch. Masks are drawn fresh from `rng` on every call.
pub fn collate<R: Rng + ?Sized>(
    chunks: &[Chunk],
    cfg: &MaskingConfig,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<MaskedBatch> {
    let seq = chunks.first().ok_or_else(|| Error::Data("collate needs at least one chunk".into()))?.len();
    if chunks.iter().any(|c| c.len() != seq || c.word_begin.len() != seq) {
        return Err(Error::Data("collate needs chunks of uniform length".into()));
    }
    let pool = vocab.non_special_ids();
    let mut input_ids = Vec::with_capacity(chunks.len() * seq);
    let mut labels = vec![IGNORE; chunks.len() * seq];
    let mut wwm_flags = Vec::with_capacity(chunks.len());
    for (b, chunk) in chunks.iter().enumerate() {
        let (selected, wwm) = select_positions(chunk, cfg, vocab, rng);
        let mut ids = chunk.ids.clone();
        for &p in &selected {
            labels[b * seq + p] = chunk.ids[p] as i64;
        }
        apply_replacement(&mut ids, &selected, cfg.split, vocab, &pool, rng);
        input_ids.extend(ids);
        wwm_flags.push(wwm);
    }
    Ok(MaskedBatch {
        batch: chunks.len(),
        seq,
        input_ids,
        labels,
        wwm_flags,
    })
}
