//! Token-id layout: 4 special tokens followed by M blocks of K digit tokens.

use crate::error::{CoreError, Result};

pub const TOKEN_PAD: usize = 0;
pub const TOKEN_BOS: usize = 1;
pub const TOKEN_EOS: usize = 2;
pub const TOKEN_UNK: usize = 3;
pub const N_SPECIAL_TOKENS: usize = 4;

/// Bijective map between (position, digit) pairs and token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    m: usize,
    k: usize,
}

impl VocabLayout {
    pub fn new(m: usize, k: usize) -> Self {
        assert!(m >= 1 && k >= 1);
        VocabLayout { m, k }
    }

    pub fn sid_len(&self) -> usize {
        self.m
    }

    pub fn codes_per_level(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL_TOKENS + self.m * self.k
    }

    /// Token id for digit `d` at position `p`.
    pub fn token(&self, p: usize, d: u16) -> usize {
        debug_assert!(p < self.m && (d as usize) < self.k);
        N_SPECIAL_TOKENS + p * self.k + d as usize
    }

    /// Inverse of [`token`]; `None` for special or out-of-range ids.
    pub fn parse_token(&self, token: usize) -> Option<(usize, u16)> {
        if token < N_SPECIAL_TOKENS || token >= self.vocab_size() {
            return None;
        }
        let off = token - N_SPECIAL_TOKENS;
        Some((off / self.k, (off % self.k) as u16))
    }

    /// First token id of the digit block for position `p`.
    pub fn position_block(&self, p: usize) -> std::ops::Range<usize> {
        let start = N_SPECIAL_TOKENS + p * self.k;
        start..start + self.k
    }

    pub fn tokens_for_sid(&self, digits: &[u16]) -> Result<Vec<usize>> {
        if digits.len() != self.m {
            return Err(CoreError::data(format!(
                "SID length {} does not match layout M={}",
                digits.len(),
                self.m
            )));
        }
        Ok(digits.iter().enumerate().map(|(p, &d)| self.token(p, d)).collect())
    }
}
