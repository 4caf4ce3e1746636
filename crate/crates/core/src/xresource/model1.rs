//! IBM Model 1 lexical translation estimation.

use std::collections::HashMap;
use std::path::Path;

use super::{table_word, TranslationTable};
use crate::error::{Error, Result};
use crate::par::{map_indexed, ExecMode};

/// Sentence-aligned word lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::InvalidInput(format!("sentence pair {i} has an empty side")));
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn pairs(&self) -> &[(Vec<String>, Vec<String>)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One `source sentence \t target sentence` pair per line.
    pub fn to_tsv(&self) -> String {
        self.pairs
            .iter()
            .map(|(s, t)| format!("{}\t{}\n", s.join(" "), t.join(" ")))
            .collect()
    }
}

/// Loads a TSV parallel corpus. Each side is normalised; pairs with an empty
/// side after normalisation are dropped.
pub fn load_parallel_corpus(path: &Path) -> Result<ParallelCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((s, t)) = line.split_once('\t') else {
            return Err(Error::parse(path.display().to_string(), i + 1, "expected `source\\ttarget`"));
        };
        let words = |x: &str| -> Vec<String> { x.split_whitespace().filter_map(table_word).collect() };
        let (s, t) = (words(s), words(t));
        if !s.is_empty() && !t.is_empty() {
            pairs.push((s, t));
        }
    }
    ParallelCorpus::new(pairs)
}

struct Interned {
    src_words: Vec<String>,
    tgt_words: Vec<String>,
    /// (source id, target id) of every co-occurring pair.
    params: Vec<(u32, u32)>,
    /// Per sentence: source length and a `tgt_len × src_len` grid of param ids.
    sentences: Vec<(usize, Vec<u32>)>,
}

fn intern(corpus: &ParallelCorpus) -> Interned {
    let mut src_ids: HashMap<&str, u32> = HashMap::new();
    let mut tgt_ids: HashMap<&str, u32> = HashMap::new();
    let mut src_words = Vec::new();
    let mut tgt_words = Vec::new();
    let mut param_ids: HashMap<(u32, u32), u32> = HashMap::new();
    let mut params = Vec::new();
    let mut sentences = Vec::with_capacity(corpus.len());

    for (src, tgt) in corpus.pairs() {
        let s: Vec<u32> = src
            .iter()
            .map(|w| {
                *src_ids.entry(w).or_insert_with(|| {
                    src_words.push(w.clone());
                    (src_words.len() - 1) as u32
                })
            })
            .collect();
        let mut grid = Vec::with_capacity(s.len() * tgt.len());
        for w in tgt {
            let t = *tgt_ids.entry(w).or_insert_with(|| {
                tgt_words.push(w.clone());
                (tgt_words.len() - 1) as u32
            });
            for &si in &s {
                let id = *param_ids.entry((si, t)).or_insert_with(|| {
                    params.push((si, t));
                    (params.len() - 1) as u32
                });
                grid.push(id);
            }
        }
        sentences.push((s.len(), grid));
    }
    Interned {
        src_words,
        tgt_words,
        params,
        sentences,
    }
}

/// Expected counts and log-likelihood contribution of one sentence pair.
fn expectation(src_len: usize, grid: &[u32], theta: &[f64]) -> (Vec<(u32, f64)>, f64) {
    let mut counts = Vec::with_capacity(grid.len());
    let mut ll = 0.0;
    for row in grid.chunks(src_len) {
        let denom: f64 = row.iter().map(|&p| theta[p as usize]).sum();
        ll += (denom / src_len as f64).ln();
        for &p in row {
            counts.push((p, theta[p as usize] / denom));
        }
    }
    (counts, ll)
}

/// Runs Model 1 EM from a uniform start for `iterations` rounds and returns
/// the table together with the corpus log-likelihood before the first and
/// after every iteration (`iterations + 1` values).
pub fn estimate_model1_traced(
    corpus: &ParallelCorpus,
    iterations: usize,
    mode: ExecMode,
) -> Result<(TranslationTable, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("parallel corpus is empty".into()));
    }
    if iterations == 0 {
        return Err(Error::InvalidInput("Model 1 needs at least one iteration".into()));
    }
    let data = intern(corpus);
    let mut theta = vec![1.0 / data.tgt_words.len() as f64; data.params.len()];
    let mut trace = Vec::with_capacity(iterations + 1);

    for _ in 0..iterations {
        let per_sentence = map_indexed(mode, &data.sentences, |_, (len, grid)| expectation(*len, grid, &theta));
        let mut counts = vec![0.0; theta.len()];
        let mut ll = 0.0;
        for (sc, sll) in per_sentence {
            for (p, c) in sc {
                counts[p as usize] += c;
            }
            ll += sll;
        }
        trace.push(ll);

        let mut totals = vec![0.0; data.src_words.len()];
        for (&(s, _), &c) in data.params.iter().zip(&counts) {
            totals[s as usize] += c;
        }
        for ((&(s, _), &c), th) in data.params.iter().zip(&counts).zip(theta.iter_mut()) {
            *th = c / totals[s as usize];
        }
    }
    let final_ll: f64 = data
        .sentences
        .iter()
        .map(|(len, grid)| expectation(*len, grid, &theta).1)
        .sum();
    trace.push(final_ll);

    let mut table = TranslationTable::default();
    for (&(s, t), &p) in data.params.iter().zip(&theta) {
        if p > 0.0 {
            table.add(&data.src_words[s as usize], &data.tgt_words[t as usize], p);
        }
    }
    Ok((table, trace))
}

pub fn estimate_model1(corpus: &ParallelCorpus, iterations: usize) -> Result<TranslationTable> {
    estimate_model1_traced(corpus, iterations, ExecMode::default()).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::new(
            pairs
                .iter()
                .map(|(s, t)| {
                    (
                        s.split(' ').map(String::from).collect(),
                        t.split(' ').map(String::from).collect(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    /// Textbook EM over a dense t(f|e) table, kept independent of the
    /// interned implementation above.
    fn oracle(pairs: &[(&str, &str)], iterations: usize) -> HashMap<(String, String), f64> {
        let pairs: Vec<(Vec<&str>, Vec<&str>)> = pairs
            .iter()
            .map(|(s, t)| (s.split(' ').collect(), t.split(' ').collect()))
            .collect();
        let mut tgt_vocab: Vec<&str> = pairs.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        tgt_vocab.sort();
        tgt_vocab.dedup();
        let mut src_vocab: Vec<&str> = pairs.iter().flat_map(|(s, _)| s.iter().copied()).collect();
        src_vocab.sort();
        src_vocab.dedup();
        let mut t: HashMap<(String, String), f64> = HashMap::new();
        for s in &src_vocab {
            for f in &tgt_vocab {
                t.insert((s.to_string(), f.to_string()), 1.0 / tgt_vocab.len() as f64);
            }
        }
        for _ in 0..iterations {
            let mut count: HashMap<(String, String), f64> = HashMap::new();
            let mut total: HashMap<String, f64> = HashMap::new();
            for (es, fs) in &pairs {
                for f in fs {
                    let z: f64 = es.iter().map(|e| t[&(e.to_string(), f.to_string())]).sum();
                    for e in es {
                        let c = t[&(e.to_string(), f.to_string())] / z;
                        *count.entry((e.to_string(), f.to_string())).or_default() += c;
                        *total.entry(e.to_string()).or_default() += c;
                    }
                }
            }
            for ((e, f), v) in t.iter_mut() {
                *v = count.get(&(e.clone(), f.clone())).copied().unwrap_or(0.0) / total[e];
            }
        }
        t
    }

    #[test]
    fn single_candidate_gets_all_mass() {
        let t = estimate_model1(&corpus(&[("cat", "katze")]), 5).unwrap();
        assert_eq!(t.prob("cat", "katze"), 1.0);
    }

    #[test]
    fn symmetric_pair_stays_uniform() {
        for it in 1..6 {
            let t = estimate_model1(&corpus(&[("a b", "x y")]), it).unwrap();
            assert!((t.prob("a", "x") - 0.5).abs() < 1e-12);
            assert!((t.prob("a", "y") - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn disambiguating_pair_converges() {
        let pairs = [("a b", "x y"), ("a", "x")];
        let t = estimate_model1(&corpus(&pairs), 20).unwrap();
        let expected = oracle(&pairs, 20);
        // Frozen from the oracle: P(x|a) after 20 rounds.
        let frozen = expected[&("a".to_string(), "x".to_string())];
        assert!(frozen > 0.9);
        assert!((t.prob("a", "x") - frozen).abs() < 1e-12);
        for ((e, f), p) in &expected {
            assert!((t.prob(e, f) - p).abs() < 1e-12, "{e}->{f}");
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(estimate_model1(&ParallelCorpus::default(), 3).is_err());
        assert!(ParallelCorpus::new(vec![(vec![], vec!["x".into()])]).is_err());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let c = corpus(&[("a b c", "x y z"), ("a c", "x z"), ("b", "y"), ("c a b", "z w x")]);
        let (ts, ls) = estimate_model1_traced(&c, 7, ExecMode::Sequential).unwrap();
        let (tp, lp) = estimate_model1_traced(&c, 7, ExecMode::Parallel).unwrap();
        assert_eq!(ts, tp);
        assert_eq!(ls, lp);
    }

    proptest! {
        #[test]
        fn likelihood_never_decreases_and_rows_sum_to_one(
            raw in prop::collection::vec(
                (prop::collection::vec(0u8..5, 1..4), prop::collection::vec(0u8..5, 1..4)),
                1..6,
            )
        ) {
            let pairs: Vec<(Vec<String>, Vec<String>)> = raw
                .iter()
                .map(|(s, t)| (
                    s.iter().map(|i| format!("s{i}")).collect(),
                    t.iter().map(|i| format!("t{i}")).collect(),
                ))
                .collect();
            let c = ParallelCorpus::new(pairs).unwrap();
            let (table, trace) = estimate_model1_traced(&c, 8, ExecMode::Sequential).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9, "{:?}", trace);
            }
            for (_, list) in table.iter_sorted() {
                let mass: f64 = list.iter().map(|t| t.prob).sum();
                prop_assert!((mass - 1.0).abs() < 1e-9);
            }
            table.validate().unwrap();
        }
    }
}
