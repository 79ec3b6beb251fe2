//! Closed-vocabulary text encoder for the backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::style::EMBED_DIM;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAX_TOKENS: usize = 16;
pub const TEXT_ENCODER_SEED: u64 = 0x7e_57;

/// Default vocabulary, one word per line.
pub const VOCAB: &str = include_str!("../../assets/vocab.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `L × D`; rows past `len` hold the pad embedding.
    pub tokens: Tensor<f32>,
    pub len: usize,
}

/// Word plus position embeddings; rows do not interact.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab: Vec<String>,
    pub store: ParamStore<f32>,
}

/// Lowercase, split on whitespace, commas are their own tokens.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .replace(',', " , ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl TextEncoder {
    pub fn new(seed: u64) -> Self {
        Self::with_vocab(VOCAB.lines().map(str::trim).filter(|w| !w.is_empty()).map(String::from).collect(), seed)
    }

    pub fn with_vocab(vocab: Vec<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
        };
        let mut store = ParamStore::new();
        store.add("text.words", draw(&[vocab.len(), EMBED_DIM]));
        let mut pos = draw(&[MAX_TOKENS, EMBED_DIM]);
        pos.scale_assign(0.5);
        store.add("text.pos", pos);
        store.add("text.pad", draw(&[1, EMBED_DIM]));
        Self { vocab, store }
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.vocab.iter().position(|v| v == w)
    }

    /// Token ids of a prompt. Unknown words are all reported together.
    pub fn ids(&self, prompt: &str) -> Result<Vec<usize>> {
        let words = tokenize(prompt);
        let unknown: Vec<String> = words.iter().filter(|w| self.word_id(w).is_none()).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::OutOfVocabulary(unknown));
        }
        if words.len() > MAX_TOKENS {
            return Err(Error::validation("prompt", format!("{} tokens exceed the limit of {MAX_TOKENS}", words.len())));
        }
        Ok(words.iter().map(|w| self.word_id(w).expect("checked")).collect())
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let ids = self.ids(prompt)?;
        let words = self.store.by_name("text.words").expect("words");
        let pos = self.store.by_name("text.pos").expect("pos");
        let pad = self.store.by_name("text.pad").expect("pad");
        let mut out = Vec::with_capacity(MAX_TOKENS * EMBED_DIM);
        for i in 0..MAX_TOKENS {
            match ids.get(i) {
                Some(&id) => {
                    let w = &words.data()[id * EMBED_DIM..(id + 1) * EMBED_DIM];
                    let p = &pos.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM];
                    out.extend(w.iter().zip(p).map(|(a, b)| a + b));
                }
                None => out.extend_from_slice(pad.data()),
            }
        }
        Ok(TextEmbedding { tokens: Tensor::new(&[MAX_TOKENS, EMBED_DIM], out), len: ids.len() })
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(e: &TextEmbedding) -> Vec<&[f32]> {
        e.tokens.data().chunks(EMBED_DIM).collect()
    }

    #[test]
    fn four_real_tokens_then_pads() {
        let t = TextEncoder::new(TEXT_ENCODER_SEED);
        let e = t.encode("a person, plain").unwrap();
        assert_eq!(e.len, 4);
        let r = rows(&e);
        let pad = t.store.by_name("text.pad").unwrap().data();
        for row in &r[4..] {
            assert_eq!(*row, pad);
        }
        assert!(r[..4].iter().all(|row| *row != pad));
    }

    #[test]
    fn empty_prompt_is_all_pad() {
        let t = TextEncoder::new(TEXT_ENCODER_SEED);
        let e = t.encode("").unwrap();
        assert_eq!(e.len, 0);
        let pad = t.store.by_name("text.pad").unwrap().data();
        assert!(rows(&e).iter().all(|r| *r == pad));
    }

    #[test]
    fn style_word_changes_only_its_row() {
        let t = TextEncoder::new(TEXT_ENCODER_SEED);
        let a = t.encode("a person, stripes").unwrap();
        let b = t.encode("a person, plain").unwrap();
        let diff: Vec<usize> = (0..MAX_TOKENS).filter(|&i| rows(&a)[i] != rows(&b)[i]).collect();
        assert_eq!(diff, vec![3]);
    }

    #[test]
    fn unknown_words_are_listed() {
        let t = TextEncoder::new(TEXT_ENCODER_SEED);
        match t.encode("a person, realistic zebra") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, vec!["realistic", "zebra"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlong_prompt_is_rejected() {
        let t = TextEncoder::new(TEXT_ENCODER_SEED);
        let long = vec!["red"; MAX_TOKENS + 1].join(" ");
        assert!(matches!(t.encode(&long), Err(Error::Validation { .. })));
    }

    #[test]
    fn tokenizer_splits_commas() {
        assert_eq!(tokenize("A person,red  plain"), vec!["a", "person", ",", "red", "plain"]);
    }
}
