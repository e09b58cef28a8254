//! Lossless palette tokenizer: one token per cell, raster order.

use std::ops::Deref;

use crate::synthdata::{Episode, GridImage};
use crate::{Error, Result};

/// Ordered token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }

    /// Builds a sequence, rejecting any token outside `[0, vocab)`.
    pub fn checked(tokens: Vec<u32>, vocab: usize) -> Result<Self> {
        let seq = TokenSeq(tokens);
        seq.validate(vocab)?;
        Ok(seq)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(Error::Vocabulary { token, vocab }),
            None => Ok(()),
        }
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    pub fn concat(&self, other: &[u32]) -> TokenSeq {
        let mut v = self.0.clone();
        v.extend_from_slice(other);
        TokenSeq(v)
    }
}

impl Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

/// Segment layout of an in-context sequence:
/// `x1, y1, ..., xK, yK, x_q` and optionally `y_q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub k: usize,
    pub tokens_per_image: usize,
    pub with_target: bool,
}

impl SequenceLayout {
    pub fn input_len(&self) -> usize {
        (2 * self.k + 1) * self.tokens_per_image
    }

    pub fn full_len(&self) -> usize {
        (2 * self.k + 2) * self.tokens_per_image
    }

    pub fn len(&self) -> usize {
        if self.with_target {
            self.full_len()
        } else {
            self.input_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn tokenize_grid(img: &GridImage) -> TokenSeq {
    TokenSeq(img.cells().to_vec())
}

pub fn detokenize_grid(tokens: &[u32], height: usize, width: usize, vocab: usize) -> Result<GridImage> {
    if tokens.len() != height * width {
        return Err(Error::shape(format!(
            "{} tokens cannot fill a {height}x{width} grid",
            tokens.len()
        )));
    }
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocabulary { token, vocab });
    }
    GridImage::new(height, width, tokens.to_vec())
}

/// Returns `(input, target)`: the tokenized demos followed by the query, and
/// the tokenized ground-truth output.
pub fn assemble_sequence(episode: &Episode) -> (TokenSeq, TokenSeq) {
    let t = episode.query.cells().len();
    let mut input = Vec::with_capacity((2 * episode.k() + 1) * t);
    for (x, y) in &episode.demos {
        input.extend_from_slice(x.cells());
        input.extend_from_slice(y.cells());
    }
    input.extend_from_slice(episode.query.cells());
    (TokenSeq(input), tokenize_grid(&episode.target))
}

/// Cuts a sequence back into grids in layout order.
pub fn split_sequence(
    seq: &[u32],
    layout: SequenceLayout,
    height: usize,
    width: usize,
    vocab: usize,
) -> Result<Vec<GridImage>> {
    let t = layout.tokens_per_image;
    if t == 0 || t != height * width {
        return Err(Error::shape(format!(
            "layout has {t} tokens per image but the grid is {height}x{width}"
        )));
    }
    if !seq.len().is_multiple_of(t) || seq.len() != layout.len() {
        return Err(Error::shape(format!(
            "sequence of {} tokens does not match layout length {}",
            seq.len(),
            layout.len()
        )));
    }
    seq.chunks(t)
        .map(|c| detokenize_grid(c, height, width, vocab))
        .collect()
}
