//! Word-level translation resources: lexical tables, alignment estimation,
//! dictionary and embedding-neighbourhood conversion.

mod convert;
mod model1;

pub use convert::{load_dictionary, table_from_dictionary, table_from_embeddings, EmbeddingConversion, WordEmbeddingSet};
pub use model1::{estimate_model1, estimate_model1_traced, load_parallel_corpus, ParallelCorpus};

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::textprep::normalize_text;

/// Slack allowed on per-source probability mass.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub target: String,
    pub prob: f64,
}

/// `P(target | source)` for a direction `src_lang → tgt_lang`.
///
/// Each source word's candidates are kept sorted by target word so lookups
/// and serialisation are deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationTable {
    pub src_lang: String,
    pub tgt_lang: String,
    entries: HashMap<String, Vec<Translation>>,
}

impl Default for TranslationTable {
    fn default() -> Self {
        Self::new("src", "tgt")
    }
}

impl TranslationTable {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>) -> Self {
        TranslationTable {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            entries: HashMap::new(),
        }
    }

    /// Adds `prob` to the `(source, target)` entry, creating it if needed.
    pub fn add(&mut self, source: &str, target: &str, prob: f64) {
        let list = self.entries.entry(source.to_owned()).or_default();
        match list.binary_search_by(|t| t.target.as_str().cmp(target)) {
            Ok(i) => list[i].prob += prob,
            Err(i) => list.insert(
                i,
                Translation {
                    target: target.to_owned(),
                    prob,
                },
            ),
        }
    }

    /// Replaces the distribution for `source`. Empty distributions are not stored.
    pub fn set_distribution(&mut self, source: &str, mut dist: Vec<Translation>) {
        if dist.is_empty() {
            self.entries.remove(source);
            return;
        }
        dist.sort_by(|a, b| a.target.cmp(&b.target));
        self.entries.insert(source.to_owned(), dist);
    }

    /// The stored distribution; empty for an unknown word.
    pub fn lookup(&self, word: &str) -> &[Translation] {
        self.entries.get(word).map_or(&[], Vec::as_slice)
    }

    /// `T(target, source) = P(target | source)`; zero when absent.
    pub fn prob(&self, source: &str, target: &str) -> f64 {
        let list = self.lookup(source);
        list.binary_search_by(|t| t.target.as_str().cmp(target))
            .map_or(0.0, |i| list[i].prob)
    }

    /// The `k` most probable targets (ties by target word), renormalised to
    /// sum to one.
    pub fn top_k(&self, word: &str, k: usize) -> Vec<Translation> {
        top_k_of(self.lookup(word), k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_entries(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Source words in sorted order.
    pub fn sources(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        s.sort_unstable();
        s
    }

    pub fn iter_sorted(&self) -> impl Iterator<Item = (&str, &[Translation])> {
        self.sources()
            .into_iter()
            .map(move |s| (s, self.entries[s].as_slice()))
    }

    /// Checks probability bounds and per-source mass ≤ 1.
    pub fn validate(&self) -> Result<()> {
        for (src, list) in &self.entries {
            let mut mass = 0.0;
            for t in list {
                if !(t.prob.is_finite() && (0.0..=1.0 + MASS_TOLERANCE).contains(&t.prob)) {
                    return Err(Error::InvalidInput(format!(
                        "P({} | {src}) = {} is not a probability",
                        t.target, t.prob
                    )));
                }
                mass += t.prob;
            }
            if mass > 1.0 + MASS_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "translations of {src:?} carry mass {mass} > 1"
                )));
            }
        }
        Ok(())
    }

    /// TSV `source\ttarget\tprob`, sorted.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (src, list) in self.iter_sorted() {
            for t in list {
                out.push_str(&format!("{src}\t{}\t{}\n", t.target, t.prob));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn top_k_of(list: &[Translation], k: usize) -> Vec<Translation> {
    let mut sorted = list.to_vec();
    sorted.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.target.cmp(&b.target)));
    sorted.truncate(k);
    let mass: f64 = sorted.iter().map(|t| t.prob).sum();
    if mass <= 0.0 {
        return Vec::new();
    }
    for t in &mut sorted {
        t.prob /= mass;
    }
    sorted
}

/// Normalises a table word; `None` if nothing usable remains or the word
/// splits into several tokens.
pub(crate) fn table_word(raw: &str) -> Option<String> {
    let w = normalize_text(raw);
    (!w.is_empty() && !w.contains(' ')).then_some(w)
}

/// Parses a lexical table, one `source target probability` triple per line
/// (tab or space separated). Duplicate pairs are summed.
pub fn parse_lexical_table(text: &str, origin: &str) -> Result<TranslationTable> {
    let mut table = TranslationTable::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [src, tgt, p] = fields.as_slice() else {
            return Err(Error::parse(origin, lineno, format!("expected 3 fields, found {}", fields.len())));
        };
        let prob: f64 = p
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("bad probability {p:?}")))?;
        if !(prob.is_finite() && (0.0..=1.0).contains(&prob)) {
            return Err(Error::parse(origin, lineno, format!("probability {prob} outside [0, 1]")));
        }
        if let (Some(s), Some(t)) = (table_word(src), table_word(tgt)) {
            table.add(&s, &t, prob);
        }
    }
    table
        .validate()
        .map_err(|e| Error::parse(origin, 0, e.to_string()))?;
    Ok(table)
}

pub fn load_lexical_table(path: &Path) -> Result<TranslationTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lexical_table(&text, &path.display().to_string())
}
