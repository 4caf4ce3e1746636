//! Text normalisation, word tokenisation and the subword vocabulary.

mod bpe;

pub use bpe::{encode_pair, train_subword_vocab, TokenizedSequence, Vocab, CLS, PAD, SEP, UNK};

use std::collections::HashSet;
use std::path::Path;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Lowercases, strips diacritics (canonical decomposition, then combining
/// marks dropped), replaces every non-alphabetic character with a space and
/// collapses whitespace.
pub fn normalize_text(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.nfd().filter(|&c| !is_combining_mark(c)) {
        if c.is_alphabetic() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Per-language stopword set.
#[derive(Clone, Debug, Default)]
pub struct Stoplist {
    words: HashSet<String>,
}

impl Stoplist {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Stoplist {
            words: words
                .into_iter()
                .map(|w| normalize_text(w.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// Parses a UTF-8 stoplist, one word per line.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    /// One of the bundled lists: `en`, `de`, `fr`, `es`, `it`.
    pub fn builtin(lang: &str) -> Option<Self> {
        let text = match lang {
            "en" => include_str!("../../data/stopwords/en.txt"),
            "de" => include_str!("../../data/stopwords/de.txt"),
            "fr" => include_str!("../../data/stopwords/fr.txt"),
            "es" => include_str!("../../data/stopwords/es.txt"),
            "it" => include_str!("../../data/stopwords/it.txt"),
            _ => return None,
        };
        Some(Self::parse(text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Splits normalised text on whitespace and drops stopwords. No stemming.
pub fn tokenize_words(text: &str, stoplist: &Stoplist) -> Vec<String> {
    text.split_whitespace()
        .filter(|w| !stoplist.contains(w))
        .map(str::to_owned)
        .collect()
}

/// `normalize_text` followed by `tokenize_words`.
pub fn preprocess(raw: &str, stoplist: &Stoplist) -> Vec<String> {
    tokenize_words(&normalize_text(raw), stoplist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("Über Café!"), "uber cafe");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("katze,"), "katze");
        assert_eq!(normalize_text("  l'été  2021 -- Ñandú "), "l ete nandu");
    }

    #[test]
    fn tokenize_examples() {
        let the = Stoplist::new(["the"]);
        assert_eq!(tokenize_words("the black cat", &the), vec!["black", "cat"]);
        assert_eq!(tokenize_words("cat cat", &the), vec!["cat", "cat"]);
        let articles = Stoplist::new(["a", "an", "the"]);
        assert!(tokenize_words("a an the", &articles).is_empty());
    }

    #[test]
    fn builtin_lists_load() {
        for lang in ["en", "de", "fr", "es", "it"] {
            assert!(!Stoplist::builtin(lang).unwrap().is_empty(), "{lang}");
        }
        assert!(Stoplist::builtin("xx").is_none());
        assert!(Stoplist::builtin("de").unwrap().contains("uber"));
    }

    #[test]
    fn stoplist_file_is_one_word_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stop.txt");
        std::fs::write(&path, "the\n\nA\n  of \n").unwrap();
        let s = Stoplist::load(&path).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.contains("a") && s.contains("of"));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
            prop_assert!(!once.contains("  "));
            prop_assert_eq!(once.trim(), once.as_str());
        }
    }
}
