//! First-stage retrieval: an inverted index scored with Okapi BM25, and
//! weighted translated queries for the table-based baseline.

mod records;

pub use records::{parse_records, read_records, records_to_text, write_records, Record};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::xresource::TranslationTable;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Term → postings over documents stored in ascending id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avgdl: f64,
    /// `(doc position, term frequency)`, sorted by doc position.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_position(&self, id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(id)).ok()
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_lens[doc]
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &str, doc: usize) -> u32 {
        let Some(list) = self.postings.get(term) else { return 0 };
        match list.binary_search_by_key(&(doc as u32), |&(d, _)| d) {
            Ok(i) => list[i].1,
            Err(_) => 0,
        }
    }

    pub fn postings(&self, term: &str) -> &[(u32, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    /// `ln((N − df + 0.5) / (df + 0.5))`, clamped at zero.
    pub fn idf(&self, term: &str) -> f64 {
        idf(self.num_docs(), self.df(term))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
    }
}

pub fn idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

/// BM25 term-frequency saturation `tf·(k1+1) / (tf + k1·(1−b+b·dl/avgdl))`.
pub fn bm25_tf(tf: f64, dl: f64, avgdl: f64) -> f64 {
    if tf == 0.0 {
        return 0.0;
    }
    tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl))
}

/// Builds an index over `(doc id, words)` pairs.
pub fn build_index<S: AsRef<str>>(corpus: &[(String, Vec<S>)]) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus[a].0.cmp(&corpus[b].0));
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut doc_lens = Vec::with_capacity(corpus.len());
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    for (pos, &i) in order.iter().enumerate() {
        let (id, words) = &corpus[i];
        if doc_ids.last() == Some(id) {
            return Err(Error::InvalidInput(format!("duplicate document id {id}")));
        }
        if words.is_empty() {
            return Err(Error::InvalidInput(format!("document {id} has no words")));
        }
        let mut counts: HashMap<&str, u32> = HashMap::new();
        for w in words {
            *counts.entry(w.as_ref()).or_default() += 1;
        }
        for (term, tf) in counts {
            postings.entry(term.to_owned()).or_default().push((pos as u32, tf));
        }
        doc_ids.push(id.clone());
        doc_lens.push(words.len() as u32);
    }
    let avgdl = doc_lens.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lens.len() as f64;
    Ok(InvertedIndex {
        doc_ids,
        doc_lens,
        avgdl,
        postings,
    })
}

pub fn bm25_term(index: &InvertedIndex, term: &str, doc: usize) -> f64 {
    let tf = index.tf(term, doc);
    if tf == 0 {
        return 0.0;
    }
    index.idf(term) * bm25_tf(f64::from(tf), f64::from(index.doc_len(doc)), index.avgdl())
}

/// Target-language terms with weights, one group per source term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightedQuery {
    pub groups: Vec<Vec<(String, f64)>>,
}

impl WeightedQuery {
    /// An untranslated query: every word is its own group with weight 1.
    pub fn monolingual<S: AsRef<str>>(words: &[S]) -> Self {
        WeightedQuery {
            groups: words.iter().map(|w| vec![(w.as_ref().to_owned(), 1.0)]).collect(),
        }
    }
}

/// Replaces each query word by its `k` most probable translations,
/// renormalised to sum to one. Words without translations give empty groups.
pub fn translate_query<S: AsRef<str>>(words: &[S], table: &TranslationTable, k: usize) -> WeightedQuery {
    WeightedQuery {
        groups: words
            .iter()
            .map(|w| {
                table
                    .top_k(w.as_ref(), k)
                    .into_iter()
                    .map(|t| (t.target, t.prob))
                    .collect()
            })
            .collect(),
    }
}

/// Scores every document as the mean over groups of the weighted BM25 sum
/// and returns the top `k`, ties broken by ascending doc id. Documents that
/// match no term score zero and are still eligible.
pub fn retrieve(index: &InvertedIndex, query: &WeightedQuery, k: usize) -> Vec<(String, f64)> {
    let n_groups = query.groups.len().max(1) as f64;
    let mut scores = vec![0.0; index.num_docs()];
    for group in &query.groups {
        for (term, weight) in group {
            let idf = index.idf(term);
            if idf == 0.0 || *weight == 0.0 {
                continue;
            }
            let w = weight / n_groups;
            for &(doc, tf) in index.postings(term) {
                let dl = f64::from(index.doc_len(doc as usize));
                scores[doc as usize] += w * idf * bm25_tf(f64::from(tf), dl, index.avgdl());
            }
        }
    }
    // doc positions are already in id order, so a stable sort by score
    // leaves ties in ascending id order
    let mut ranked: Vec<usize> = (0..scores.len()).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    ranked.truncate(k);
    ranked
        .into_iter()
        .map(|d| (index.doc_ids()[d].clone(), scores[d]))
        .collect()
}
