//! Corpus loading, character tokenization, MLM masking and dataset splits.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
const FIRST_CHAR_ID: usize = 2;

/// Fraction of positions selected for prediction.
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Character vocabulary sorted by codepoint, after the reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    /// Total ids including PAD and MASK.
    pub fn size(&self) -> usize {
        self.chars.len() + FIRST_CHAR_ID
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok().map(|i| i + FIRST_CHAR_ID)
    }

    pub fn decode(&self, id: usize) -> Option<char> {
        match id {
            PAD_ID | MASK_ID => None,
            _ => self.chars.get(id - FIRST_CHAR_ID).copied(),
        }
    }

    /// Ids that tokenization can produce (everything except the specials).
    pub fn char_ids(&self) -> Range<usize> {
        FIRST_CHAR_ID..self.size()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        let vocab = Vocab::from_text(text);
        let tokens = text.chars().map(|c| vocab.id(c).expect("char in vocab")).collect();
        Ok(Self { tokens, vocab })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> &[usize] {
        &self.tokens[range]
    }
}

/// Reads a UTF-8 text file and tokenizes it character by character.
pub fn load_and_tokenize(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    Corpus::from_text(&text)
}

/// Splits `0..len` into contiguous proxy-train / proxy-val / main ranges.
pub fn split_rho(len: usize, fractions: (f64, f64, f64)) -> Result<(Range<usize>, Range<usize>, Range<usize>)> {
    let (a, b, c) = fractions;
    if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let first = ((a * len as f64).round() as usize).min(len);
    let second = (((a + b) * len as f64).round() as usize).clamp(first, len);
    Ok((0..first, first..second, second..len))
}

/// Splits a range into a leading train part and a trailing validation part.
pub fn split_train_val(range: Range<usize>, val_fraction: f64) -> (Range<usize>, Range<usize>) {
    let n = range.len();
    let val = ((val_fraction * n as f64).round() as usize).min(n);
    let cut = range.end - val;
    (range.start..cut, cut..range.end)
}

/// Inputs, targets and prediction flags for `batch_size` windows of `seq_len` tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl MaskedBatch {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn example_masked_count(&self, i: usize) -> usize {
        self.mask[i * self.seq_len..(i + 1) * self.seq_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Batch made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> MaskedBatch {
        let s = self.seq_len;
        let mut out = MaskedBatch {
            batch_size: rows.len(),
            seq_len: s,
            inputs: Vec::with_capacity(rows.len() * s),
            targets: Vec::with_capacity(rows.len() * s),
            mask: Vec::with_capacity(rows.len() * s),
        };
        for &r in rows {
            out.inputs.extend_from_slice(&self.inputs[r * s..(r + 1) * s]);
            out.targets.extend_from_slice(&self.targets[r * s..(r + 1) * s]);
            out.mask.extend_from_slice(&self.mask[r * s..(r + 1) * s]);
        }
        out
    }

    /// Concatenates single- or multi-row batches with equal sequence length.
    pub fn concat(parts: &[MaskedBatch]) -> Result<MaskedBatch> {
        let seq_len = parts.first().map_or(0, |p| p.seq_len);
        if parts.iter().any(|p| p.seq_len != seq_len) {
            return Err(Error::shape("concat", "sequence lengths differ"));
        }
        let mut out = MaskedBatch {
            batch_size: 0,
            seq_len,
            inputs: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for p in parts {
            out.batch_size += p.batch_size;
            out.inputs.extend_from_slice(&p.inputs);
            out.targets.extend_from_slice(&p.targets);
            out.mask.extend_from_slice(&p.mask);
        }
        Ok(out)
    }

    pub fn token_count(&self) -> usize {
        self.batch_size * self.seq_len
    }
}

/// Applies the 80/10/10 corruption to one window and guarantees at least one
/// prediction target.
fn mask_window<R: Rng>(
    window: &[usize],
    char_ids: Range<usize>,
    mask_rate: f64,
    rng: &mut R,
    inputs: &mut Vec<usize>,
    targets: &mut Vec<usize>,
    mask: &mut Vec<bool>,
) {
    let start = inputs.len();
    let mut any = false;
    for &tok in window {
        let selected = rng.random::<f64>() < mask_rate;
        targets.push(tok);
        mask.push(selected);
        if selected {
            any = true;
            inputs.push(corrupt(tok, char_ids.clone(), rng));
        } else {
            inputs.push(tok);
        }
    }
    if !any && !window.is_empty() {
        let pos = rng.random_range(0..window.len());
        mask[start + pos] = true;
        inputs[start + pos] = corrupt(window[pos], char_ids, rng);
    }
}

fn corrupt<R: Rng>(tok: usize, char_ids: Range<usize>, rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    if u < 0.8 {
        MASK_ID
    } else if u < 0.9 && !char_ids.is_empty() {
        rng.random_range(char_ids)
    } else {
        tok
    }
}

/// Draws `batch_size` windows uniformly (with replacement) and masks them.
pub fn sample_masked_batch<R: Rng>(
    tokens: &[usize],
    vocab: &Vocab,
    batch_size: usize,
    seq_len: usize,
    mask_rate: f64,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if tokens.len() < seq_len || seq_len == 0 {
        return Err(Error::Config(format!(
            "token slice of length {} is shorter than sequence length {seq_len}",
            tokens.len()
        )));
    }
    let offsets = tokens.len() - seq_len + 1;
    let mut inputs = Vec::with_capacity(batch_size * seq_len);
    let mut targets = Vec::with_capacity(batch_size * seq_len);
    let mut mask = Vec::with_capacity(batch_size * seq_len);
    for _ in 0..batch_size {
        let off = rng.random_range(0..offsets);
        mask_window(
            &tokens[off..off + seq_len],
            vocab.char_ids(),
            mask_rate,
            rng,
            &mut inputs,
            &mut targets,
            &mut mask,
        );
    }
    Ok(MaskedBatch {
        batch_size,
        seq_len,
        inputs,
        targets,
        mask,
    })
}

/// Deterministic evaluation batches; identical for every run sharing `seed`.
pub fn fixed_validation_set(
    tokens: &[usize],
    vocab: &Vocab,
    n_batches: usize,
    batch_size: usize,
    seq_len: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<Vec<MaskedBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_batches)
        .map(|_| sample_masked_batch(tokens, vocab, batch_size, seq_len, mask_rate, &mut rng))
        .collect()
}

/// Non-overlapping windows spread evenly over a token slice, each with a
/// fixed mask derived from `(seed, example id)`. Used where examples need
/// stable identities.
pub fn example_pool(
    tokens: &[usize],
    vocab: &Vocab,
    seq_len: usize,
    max_examples: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedBatch> {
    let n = (tokens.len() / seq_len.max(1)).min(max_examples);
    if n == 0 {
        return Err(Error::Config("token slice too short for one example".into()));
    }
    let mut inputs = Vec::with_capacity(n * seq_len);
    let mut targets = Vec::with_capacity(n * seq_len);
    let mut mask = Vec::with_capacity(n * seq_len);
    let stride = tokens.len() / n;
    for id in 0..n {
        let off = id * stride;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        mask_window(
            &tokens[off..off + seq_len],
            vocab.char_ids(),
            mask_rate,
            &mut rng,
            &mut inputs,
            &mut targets,
            &mut mask,
        );
    }
    Ok(MaskedBatch {
        batch_size: n,
        seq_len,
        inputs,
        targets,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_char_vocab() {
        let c = Corpus::from_text("ab").unwrap();
        assert_eq!(c.vocab.size(), 4);
        assert_eq!(c.tokens, vec![2, 3]);
        assert_eq!(c.vocab.decode(3), Some('b'));
        assert_eq!(c.vocab.decode(MASK_ID), None);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Corpus::from_text("").is_err());
    }

    #[test]
    fn rho_split_sizes() {
        let (a, b, c) = split_rho(1000, (0.20, 0.01, 0.79)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (200, 10, 790));
        let (a, b, c) = split_rho(1000, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1000, 0, 0));
        assert!(split_rho(1000, (0.5, 0.2, 0.2)).is_err());
    }

    #[test]
    fn forced_single_mask() {
        let corpus = Corpus::from_text("the quick brown fox jumps over the lazy dog").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_masked_batch(&corpus.tokens, &corpus.vocab, 7, 10, 0.0, &mut rng).unwrap();
        assert_eq!(b.masked_count(), 7);
        for i in 0..7 {
            assert_eq!(b.example_masked_count(i), 1);
        }
    }

    #[test]
    fn targets_carry_original_tokens() {
        let corpus = Corpus::from_text("abcdefghijklmnopqrstuvwxyz").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = sample_masked_batch(&corpus.tokens, &corpus.vocab, 50, 8, 0.5, &mut rng).unwrap();
        for i in 0..50 {
            let row = &b.targets[i * 8..(i + 1) * 8];
            // windows are contiguous runs of the alphabet
            assert!(row.windows(2).all(|w| w[1] == w[0] + 1));
        }
        for ((&inp, &tgt), &m) in b.inputs.iter().zip(&b.targets).zip(&b.mask) {
            if !m {
                assert_eq!(inp, tgt);
            }
        }
    }

    #[test]
    fn pool_is_deterministic_and_spread() {
        let corpus = Corpus::from_text(&"lorem ipsum dolor sit amet ".repeat(20)).unwrap();
        let a = example_pool(&corpus.tokens, &corpus.vocab, 16, 100, 0.15, 5).unwrap();
        assert_eq!(
            a,
            example_pool(&corpus.tokens, &corpus.vocab, 16, 100, 0.15, 5).unwrap()
        );
        assert_eq!(a.batch_size, corpus.len() / 16);
        let b = example_pool(&corpus.tokens, &corpus.vocab, 16, 3, 0.15, 5).unwrap();
        let stride = corpus.len() / 3;
        assert_eq!(&b.targets[16..32], &corpus.tokens[stride..stride + 16]);
        assert_eq!(&b.targets[32..48], &corpus.tokens[2 * stride..2 * stride + 16]);
    }

    #[test]
    fn validation_set_empty_when_zero_batches() {
        let corpus = Corpus::from_text("abcdefgh").unwrap();
        let v = fixed_validation_set(&corpus.tokens, &corpus.vocab, 0, 2, 4, 0.15, 1).unwrap();
        assert!(v.is_empty());
    }
}
