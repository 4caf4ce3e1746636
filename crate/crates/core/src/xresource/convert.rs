use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{table_word, Translation, TranslationTable};
use crate::error::{Error, Result};
use crate::par::{map_indexed, ExecMode};

/// Spreads each source word's mass uniformly over its dictionary
/// translations. Words without translations are left out.
pub fn table_from_dictionary(dict: &BTreeMap<String, BTreeSet<String>>) -> TranslationTable {
    let mut table = TranslationTable::default();
    for (src, targets) in dict {
        if targets.is_empty() {
            continue;
        }
        let p = 1.0 / targets.len() as f64;
        table.set_distribution(
            src,
            targets
                .iter()
                .map(|t| Translation {
                    target: t.clone(),
                    prob: p,
                })
                .collect(),
        );
    }
    table
}

/// Reads a `source\ttarget` dictionary.
pub fn load_dictionary(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dict: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [src, tgt] = fields.as_slice() else {
            return Err(Error::parse(path.display().to_string(), i + 1, "expected `source\\ttarget`"));
        };
        if let (Some(s), Some(t)) = (table_word(src), table_word(tgt)) {
            dict.entry(s).or_default().insert(t);
        }
    }
    Ok(dict)
}

/// Word vectors of one language, all of the same dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddingSet {
    dim: usize,
    words: Vec<String>,
    vectors: Vec<f64>,
}

impl WordEmbeddingSet {
    pub fn new(dim: usize) -> Self {
        WordEmbeddingSet {
            dim,
            words: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn push(&mut self, word: impl Into<String>, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "vector of dimension {} in a {}-dimensional set",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite embedding value".into()));
        }
        self.words.push(word.into());
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Text format: a `count dim` header, then `word v1 … vdim` per line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(origin, 1, "expected `count dim`"))?;
        let [count, dim] = nums.as_slice() else {
            return Err(Error::parse(origin, 1, "expected `count dim`"));
        };
        let mut set = WordEmbeddingSet::new(*dim);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().unwrap_or_default();
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(origin, i + 1, "bad vector value"))?;
            let Some(word) = table_word(word) else { continue };
            set.push(word, &values)
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        if set.len() > *count {
            return Err(Error::parse(origin, 1, format!("header declares {count} words, found {}", set.len())));
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Result of [`table_from_embeddings`]: the table and how many source words
/// were dropped because cosine similarity was undefined for them.
#[derive(Clone, Debug)]
pub struct EmbeddingConversion {
    pub table: TranslationTable,
    pub skipped: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uses the `k` nearest target words by cosine similarity as translations,
/// with similarities clamped at zero and normalised to sum to one.
pub fn table_from_embeddings(
    src: &WordEmbeddingSet,
    tgt: &WordEmbeddingSet,
    k: usize,
    mode: ExecMode,
) -> Result<EmbeddingConversion> {
    if src.dim() != tgt.dim() {
        return Err(Error::InvalidInput(format!(
            "embedding dimensions differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let tgt_norms: Vec<f64> = (0..tgt.len()).map(|j| norm(tgt.vector(j))).collect();
    let sources: Vec<usize> = (0..src.len()).collect();

    let rows = map_indexed(mode, &sources, |_, &i| {
        let v = src.vector(i);
        let n = norm(v);
        if n == 0.0 {
            return None;
        }
        let mut sims: Vec<(f64, &str)> = (0..tgt.len())
            .filter(|&j| tgt_norms[j] > 0.0)
            .map(|j| {
                let dot: f64 = v.iter().zip(tgt.vector(j)).map(|(a, b)| a * b).sum();
                ((dot / (n * tgt_norms[j])).max(0.0), tgt.word(j))
            })
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        sims.truncate(k);
        let mass: f64 = sims.iter().map(|s| s.0).sum();
        let dist: Vec<Translation> = if mass > 0.0 {
            sims.iter()
                .filter(|s| s.0 > 0.0)
                .map(|&(s, w)| Translation {
                    target: w.to_owned(),
                    prob: s / mass,
                })
                .collect()
        } else {
            Vec::new()
        };
        Some(dist)
    });

    let mut table = TranslationTable::default();
    let mut skipped = 0;
    for (i, row) in rows.into_iter().enumerate() {
        match row {
            Some(dist) => table.set_distribution(src.word(i), dist),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} source words with zero vectors skipped");
    }
    Ok(EmbeddingConversion { table, skipped })
}
