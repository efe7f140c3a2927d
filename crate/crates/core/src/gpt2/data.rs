//! Token sequences: a seeded synthetic corpus and plain-text token files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Gpt2Error;

/// A stream drawn from a fixed random bigram table in which every token has
/// four possible successors, so there is structure to learn.
pub fn synthetic_corpus(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let next: Vec<[usize; 4]> = (0..vocab)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..vocab)))
        .collect();
    let mut out = Vec::with_capacity(len);
    let mut tok = rng.random_range(0..vocab);
    for _ in 0..len {
        out.push(tok);
        tok = next[tok][rng.random_range(0..4)];
    }
    out
}

/// Inputs and next-token targets starting at `offset`.
pub fn batch(corpus: &[usize], offset: usize, seq_len: usize) -> Result<(Vec<usize>, Vec<usize>), Gpt2Error> {
    if offset + seq_len + 1 > corpus.len() {
        return Err(Gpt2Error::Config(format!(
            "corpus of {} tokens too short for a window of {} at offset {offset}",
            corpus.len(),
            seq_len + 1
        )));
    }
    let w = &corpus[offset..offset + seq_len + 1];
    Ok((w[..seq_len].to_vec(), w[1..].to_vec()))
}

/// Whitespace-separated decimal token ids.
pub fn parse_tokens(text: &str) -> Result<Vec<usize>, Gpt2Error> {
    text.split_whitespace()
        .map(|w| w.parse().map_err(|_| Gpt2Error::Config(format!("bad token `{w}`"))))
        .collect()
}

pub fn read_tokens(path: &Path) -> Result<Vec<usize>, Gpt2Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Gpt2Error::Io(format!("{}: {e}", path.display())))?;
    parse_tokens(&text)
}

pub fn write_tokens(path: &Path, tokens: &[usize]) -> Result<(), Gpt2Error> {
    let mut s = String::with_capacity(tokens.len() * 4);
    for line in tokens.chunks(32) {
        let words: Vec<String> = line.iter().map(|t| t.to_string()).collect();
        s += &words.join(" ");
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Gpt2Error::Io(format!("{}: {e}", path.display())))
}
