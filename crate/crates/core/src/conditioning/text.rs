//! Template-caption vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{MupadError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

const STANDARD_WORDS: &[&str] = &[
    "<pad>", "<unk>", "sparse", "moderate", "dense", "cellularity", "small", "medium", "large",
    "nuclei", "pink", "mauve", "purple", "tissue", "frozen", "ffpe", "section", "with", "and",
    "stain", "clean", "streaks", "artifact", "low", "high", "few", "many", "cells", "bright",
    "dark", "round", "patch",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextVocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD_ID] != "<pad>" || words[UNK_ID] != "<unk>" {
            return Err(MupadError::Format(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(MupadError::Format(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(TextVocab { words, index })
    }

    pub fn standard() -> Self {
        Self::new(STANDARD_WORDS.iter().map(|s| s.to_string()).collect())
            .expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercases, splits on whitespace and punctuation; unknown words map to `<unk>`.
    pub fn tokenize(&self, caption: &str) -> Vec<usize> {
        caption
            .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '<' && c != '>'))
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line, line number = id.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let words = r
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| MupadError::Format(e.to_string()))?;
        Self::new(words)
    }
}

/// Bin a factor in [0, 1] into one of three words.
pub fn bin_word(value: f64, words: [&str; 3]) -> &str {
    if value < 1.0 / 3.0 {
        words[0]
    } else if value < 2.0 / 3.0 {
        words[1]
    } else {
        words[2]
    }
}

pub const DENSITY_WORDS: [&str; 3] = ["sparse", "moderate", "dense"];
pub const SIZE_WORDS: [&str; 3] = ["small", "medium", "large"];
pub const HUE_WORDS: [&str; 3] = ["pink", "mauve", "purple"];

/// Caption for a set of factor values, e.g. `"dense cellularity small nuclei pink tissue frozen"`.
pub fn caption(density: f64, size: f64, hue: f64, frozen: bool) -> String {
    format!(
        "{} cellularity {} nuclei {} tissue {}",
        bin_word(density, DENSITY_WORDS),
        bin_word(size, SIZE_WORDS),
        bin_word(hue, HUE_WORDS),
        if frozen { "frozen" } else { "ffpe" }
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_caption_is_empty() {
        assert!(TextVocab::standard().tokenize("").is_empty());
        assert!(TextVocab::standard().tokenize("  ,. ").is_empty());
    }

    #[test]
    fn vocabulary_round_trips() {
        let v = TextVocab::standard();
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.id(w), i);
            assert_eq!(v.word(i), Some(w.as_str()));
        }
    }

    #[test]
    fn known_words_resolve() {
        let v = TextVocab::standard();
        let ids = v.tokenize("dense cellularity tissue");
        assert_eq!(ids, vec![4, 5, 13]);
        assert!(ids.iter().all(|&i| i != UNK_ID));
        assert_eq!(v.tokenize("Dense, GIRAFFE"), vec![4, UNK_ID]);
    }

    #[test]
    fn captions_use_only_known_words() {
        let v = TextVocab::standard();
        for &(r, s, h, f) in &[(0.0, 0.5, 1.0, true), (0.9, 0.1, 0.4, false)] {
            assert!(v.tokenize(&caption(r, s, h, f)).iter().all(|&i| i != UNK_ID));
        }
    }

    #[test]
    fn file_round_trip() {
        let v = TextVocab::standard();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(TextVocab::read_from(&buf[..]).unwrap(), v);
    }
}
