//! Character-level tokenizer over the corpus alphabet. Id 0 is blank.

use crate::error::{Error, Result};

pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz'";

/// Blank plus one id per alphabet symbol.
pub const VOCAB_SIZE: usize = 29;

pub fn token_id(c: char) -> Result<usize> {
    ALPHABET.chars().position(|a| a == c).map(|p| p + 1).ok_or(Error::OutOfAlphabet(c))
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.chars().map(token_id).collect()
}

/// Inverse of [`tokenize`]. Blank and unknown ids are skipped.
pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .filter_map(|&i| if i == 0 { None } else { ALPHABET.chars().nth(i - 1) })
        .collect()
}
