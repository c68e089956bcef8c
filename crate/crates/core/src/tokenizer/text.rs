use std::collections::HashMap;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Closed word list. Ids are positions in the sorted list; anything that is
/// not a word (framing, padding, image ids) lives above `len()` in the
/// model's unified id space.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl ReportVocab {
    /// Builds a vocabulary from any word collection (sorted, de-duplicated).
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = words.into_iter().map(Into::into).collect();
        words.sort();
        words.dedup();
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w.starts_with('<') {
                return Err(invalid(format!("{w:?} is not a valid vocabulary word")));
            }
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if words.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("vocabulary file must be sorted and free of duplicates"));
        }
        Self::new(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Whitespace tokenisation of a lowercase, punctuation-free report.
pub fn text_encode(report: &str, vocab: &ReportVocab) -> Result<Vec<usize>> {
    report
        .split_whitespace()
        .map(|w| vocab.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
        .collect()
}

pub fn text_decode(ids: &[usize], vocab: &ReportVocab) -> Result<String> {
    let words = ids
        .iter()
        .map(|&id| {
            vocab.word(id).ok_or(Error::TokenOutOfRange {
                id,
                limit: vocab.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}
