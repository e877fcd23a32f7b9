//! Token sequences over a fixed vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Integer token sequence with a padding mask (`true` marks a real position).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    mask: Vec<bool>,
    vocab_size: usize,
}

impl TokenSequence {
    /// Fully unmasked sequence.
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        let mask = vec![true; tokens.len()];
        Self::with_mask(tokens, mask, vocab_size)
    }

    pub fn with_mask(tokens: Vec<usize>, mask: Vec<bool>, vocab_size: usize) -> Result<Self> {
        ensure!(vocab_size >= 1, "vocabulary must be non-empty");
        ensure!(
            tokens.len() == mask.len(),
            "token count {} does not match mask length {}",
            tokens.len(),
            mask.len()
        );
        for (i, (&tok, &real)) in tokens.iter().zip(&mask).enumerate() {
            ensure!(
                !real || tok < vocab_size,
                "token {tok} at position {i} outside vocabulary of size {vocab_size}"
            );
        }
        Ok(Self {
            tokens,
            mask,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn is_real(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Indices of unmasked positions.
    pub fn real_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i))
    }

    pub(crate) fn set(&mut self, i: usize, tok: usize) {
        debug_assert!(tok < self.vocab_size);
        self.tokens[i] = tok;
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        one_hot(self.tokens[i], self.vocab_size)
    }

    /// Same length, vocabulary and mask.
    pub fn check_aligned(&self, other: &TokenSequence) -> Result<()> {
        ensure!(
            self.len() == other.len(),
            "sequence lengths differ: {} vs {}",
            self.len(),
            other.len()
        );
        ensure!(
            self.vocab_size == other.vocab_size,
            "vocabulary sizes differ: {} vs {}",
            self.vocab_size,
            other.vocab_size
        );
        ensure!(self.mask == other.mask, "padding masks differ");
        Ok(())
    }
}

pub fn one_hot(index: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    v
}

/// Index of the single 1 in a one-hot vector.
pub fn one_hot_index(v: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 {
            ensure!(hot.is_none(), "vector has more than one hot entry");
            hot = Some(i);
        } else {
            ensure!(x == 0.0, "entry {i} = {x} is neither 0 nor 1");
        }
    }
    hot.ok_or_else(|| crate::Error::invalid("vector has no hot entry"))
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_vocab_unmasked_token() {
        assert!(TokenSequence::new(vec![0, 3], 3).is_err());
        // masked positions may hold anything
        let s = TokenSequence::with_mask(vec![0, 99], vec![true, false], 3).unwrap();
        assert_eq!(s.real_count(), 1);
    }

    #[test]
    fn one_hot_roundtrip() {
        let v = one_hot(2, 5);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(one_hot_index(&v).unwrap(), 2);
        assert!(one_hot_index(&[0.5, 0.5]).is_err());
        assert!(one_hot_index(&[1.0, 1.0]).is_err());
        assert!(one_hot_index(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }
}
