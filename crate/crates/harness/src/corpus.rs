//! Character-level corpus.
//!
//! Tokens are the distinct bytes of the text, numbered in byte order. The
//! first 90% of the token stream is used for training, the rest for
//! evaluation.

use std::path::Path;

use anyhow::{bail, ensure, Context};
use qat_core::models::Batch;
use rand::Rng;
use sha2::{Digest, Sha256};

/// Cicero, *De finibus bonorum et malorum*, book I (Latin, public domain).
pub const BUNDLED_TEXT: &str = include_str!("../data/de_finibus_1.txt");
pub const BUNDLED_SHA256: &str = "3a8b53b29465c55f000a4985191e434cf202546943b81cc819c63c68a296c18d";

const TRAIN_FRACTION: f64 = 0.9;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    alphabet: Vec<u8>,
    tokens: Vec<usize>,
    split: usize,
}

impl Corpus {
    /// The bundled text, after verifying its checksum.
    pub fn bundled() -> anyhow::Result<Self> {
        let digest = sha256_hex(BUNDLED_TEXT.as_bytes());
        ensure!(digest == BUNDLED_SHA256, "bundled corpus checksum mismatch: {digest}");
        Self::from_bytes(BUNDLED_TEXT.as_bytes())
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read corpus {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("in corpus {}", path.display()))
    }

    /// `None` selects the bundled text.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::from_file(p),
            None => Self::bundled(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        ensure!(bytes.len() >= 2, "corpus needs at least two bytes, got {}", bytes.len());
        let mut seen = [false; 256];
        bytes.iter().for_each(|&b| seen[b as usize] = true);
        let alphabet: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut index = [usize::MAX; 256];
        alphabet.iter().enumerate().for_each(|(i, &b)| index[b as usize] = i);
        let tokens: Vec<usize> = bytes.iter().map(|&b| index[b as usize]).collect();
        let split = ((tokens.len() as f64 * TRAIN_FRACTION) as usize).clamp(1, tokens.len() - 1);
        Ok(Self { alphabet, tokens, split })
    }

    pub fn alphabet(&self) -> &[u8] {
        &self.alphabet
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train_tokens(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn eval_tokens(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    pub fn encode(&self, text: &[u8]) -> anyhow::Result<Vec<usize>> {
        text.iter()
            .map(|b| match self.alphabet.binary_search(b) {
                Ok(i) => Ok(i),
                Err(_) => bail!("byte {b:#04x} is not in the corpus alphabet"),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| self.alphabet[i]).collect()
    }

    /// `batch` windows of `seq + 1` tokens at uniformly random training
    /// offsets.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize, seq: usize) -> anyhow::Result<Batch> {
        let train = self.train_tokens();
        ensure!(
            train.len() > seq,
            "corpus too small for one batch: {} training tokens, window {}",
            train.len(),
            seq + 1
        );
        let windows: Vec<Vec<usize>> = (0..batch)
            .map(|_| {
                let start = rng.gen_range(0..train.len() - seq);
                train[start..=start + seq].to_vec()
            })
            .collect();
        Ok(Batch::from_windows(&windows)?)
    }

    /// `count` batches of evenly spaced evaluation windows.
    pub fn eval_batches(&self, count: usize, batch: usize, seq: usize) -> anyhow::Result<Vec<Batch>> {
        evenly_spaced(self.eval_tokens(), count, batch, seq)
    }

    /// Like [`eval_batches`](Self::eval_batches), over the training split.
    pub fn train_probe_batches(&self, count: usize, batch: usize, seq: usize) -> anyhow::Result<Vec<Batch>> {
        evenly_spaced(self.train_tokens(), count, batch, seq)
    }
}

fn evenly_spaced(tokens: &[usize], count: usize, batch: usize, seq: usize) -> anyhow::Result<Vec<Batch>> {
    ensure!(tokens.len() > seq, "corpus too small for one batch: {} tokens, window {}", tokens.len(), seq + 1);
    let n = count * batch;
    let last = tokens.len() - seq - 1;
    let windows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let start = if n > 1 { i * last / (n - 1) } else { 0 };
            tokens[start..=start + seq].to_vec()
        })
        .collect();
    windows.chunks(batch).map(|w| Ok(Batch::from_windows(w)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bundled_text_matches_checksum() {
        let c = Corpus::bundled().unwrap();
        assert_eq!(c.len(), BUNDLED_TEXT.len());
        assert!(c.vocab() > 20 && c.vocab() < 100, "{}", c.vocab());
        assert_eq!(c.decode(&c.encode(b"Lorem").unwrap()), b"Lorem");
        assert!(c.encode(&[0xff]).is_err());
    }

    #[test]
    fn byte_alphabet_is_sorted_and_dense() {
        let c = Corpus::from_bytes(b"abcab cab").unwrap();
        assert_eq!(c.alphabet(), b" abc");
        assert_eq!(c.encode(b"cab").unwrap(), vec![3, 1, 2]);
        assert_eq!(c.train_tokens().len() + c.eval_tokens().len(), 9);
    }

    #[test]
    fn batches_are_shifted_windows() {
        let c = Corpus::bundled().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = c.sample_batch(&mut rng, 3, 16).unwrap();
        assert_eq!((b.batch, b.seq), (3, 16));
        for w in 0..3 {
            assert_eq!(b.inputs[w * 16 + 1..(w + 1) * 16], b.targets[w * 16..(w + 1) * 16 - 1]);
        }
        let e = c.eval_batches(2, 3, 16).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e, c.eval_batches(2, 3, 16).unwrap());
    }

    #[test]
    fn small_corpus_is_an_error() {
        let c = Corpus::from_bytes(b"abcdefghij").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = c.sample_batch(&mut rng, 1, 64).unwrap_err();
        assert!(err.to_string().contains("too small"));
        assert!(Corpus::from_bytes(b"a").is_err());
    }
}
