//! The 94 recognized characters and their class indices.

use crate::error::{Error, Result};

/// ASCII punctuation in code-point order.
pub const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Bijection between characters and classes `0..94`. Class 94 is
/// end-of-sequence; row 95 of the embedding table is start-of-sequence and
/// is never predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: [Option<u8>; 128],
}

impl Default for Charset {
    fn default() -> Self {
        Self::new()
    }
}

impl Charset {
    pub const NUM_CHARS: usize = 94;
    pub const EOS: usize = 94;
    pub const SOS: usize = 95;
    /// Classifier outputs: characters plus end-of-sequence.
    pub const NUM_CLASSES: usize = 95;
    /// Embedding rows: classes plus start-of-sequence.
    pub const NUM_EMBEDDINGS: usize = 96;

    pub fn new() -> Self {
        let chars: Vec<char> = ('a'..='z').chain('A'..='Z').chain('0'..='9').chain(PUNCTUATION.chars()).collect();
        debug_assert_eq!(chars.len(), Self::NUM_CHARS);
        let mut index = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            index[c as usize] = Some(i as u8);
        }
        Self { chars, index }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn class_of(&self, c: char) -> Result<usize> {
        self.index.get(c as usize).copied().flatten().map(usize::from).ok_or(Error::UnknownChar(c))
    }

    /// `None` for end-of-sequence, start-of-sequence and out-of-range classes.
    pub fn char_of(&self, class: usize) -> Option<char> {
        self.chars.get(class).copied()
    }

    pub fn encode(&self, label: &str) -> Result<Vec<usize>> {
        label.chars().map(|c| self.class_of(c)).collect()
    }

    /// Characters up to the first end-of-sequence.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes.iter().map_while(|&c| self.char_of(c)).collect()
    }
}
