//! A seeded bilingual retrieval task with known translations.
//!
//! Source word `s_i` translates to target word `t_i`. Documents are bags of
//! target words, queries are sets of source words, and a document is
//! relevant to a query when it contains at least half (rounded up) of the
//! query's translations.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Qrels;
use crate::error::{Error, Result};
use crate::retrieval::Record;
use crate::textprep::Stoplist;
use crate::xresource::{ParallelCorpus, TranslationTable};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const STOPLIST_LANGS: [&str; 5] = ["en", "de", "fr", "es", "it"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Number of source/target word pairs.
    pub vocab_size: usize,
    pub n_docs: usize,
    pub n_queries: usize,
    /// Probability mass the table moves from the true translation to two confusers.
    pub noise: f64,
    pub seed: u64,
    pub doc_len: (usize, usize),
    pub query_len: (usize, usize),
    /// Documents per query that receive planted translations.
    pub planted_docs: usize,
    pub parallel_sentences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 200,
            n_docs: 500,
            n_queries: 60,
            noise: 0.2,
            seed: 0,
            doc_len: (10, 20),
            query_len: (3, 5),
            planted_docs: 3,
            parallel_sentences: 2000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticClir {
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
    pub corpus: Vec<Record>,
    pub queries: Vec<Record>,
    pub qrels: Qrels,
    pub table: TranslationTable,
    pub parallel: ParallelCorpus,
}

/// Minimum number of translated query words a relevant document must hold.
pub fn overlap_needed(query_len: usize) -> usize {
    query_len.div_ceil(2)
}

fn make_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>, stop: &[Stoplist]) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
            w.push(*VOWELS.choose(rng).expect("non-empty") as char);
        }
        if stop.iter().any(|s| s.contains(&w)) || !taken.insert(w.clone()) {
            continue;
        }
        out.push(w);
    }
    out
}

pub fn gen_synthetic_clir(cfg: &SynthConfig) -> Result<SyntheticClir> {
    let bad = |m: &str| Err(Error::InvalidInput(format!("infeasible synthetic parameters: {m}")));
    if cfg.vocab_size < 3 {
        return bad("vocab_size must be at least 3");
    }
    if cfg.n_docs == 0 || cfg.n_queries == 0 {
        return bad("need at least one document and one query");
    }
    if !(0.0..1.0).contains(&cfg.noise) {
        return bad("noise must lie in [0, 1)");
    }
    let (qmin, qmax) = cfg.query_len;
    let (dmin, dmax) = cfg.doc_len;
    if qmin == 0 || qmin > qmax || qmax > cfg.vocab_size {
        return bad("query length range must be non-empty and fit in the vocabulary");
    }
    if dmin == 0 || dmin > dmax {
        return bad("document length range must be non-empty");
    }
    if cfg.planted_docs == 0 || cfg.planted_docs > cfg.n_docs {
        return bad("planted_docs must be in 1..=n_docs");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stop: Vec<Stoplist> = STOPLIST_LANGS.iter().filter_map(|l| Stoplist::builtin(l)).collect();
    let mut taken = HashSet::new();
    let src_words = make_words(&mut rng, cfg.vocab_size, &mut taken, &stop);
    let tgt_words = make_words(&mut rng, cfg.vocab_size, &mut taken, &stop);
    let v = cfg.vocab_size;

    let mut docs: Vec<Vec<usize>> = (0..cfg.n_docs)
        .map(|_| {
            let len = rng.gen_range(dmin..=dmax);
            (0..len).map(|_| rng.gen_range(0..v)).collect()
        })
        .collect();
    let all: Vec<usize> = (0..v).collect();
    let queries: Vec<Vec<usize>> = (0..cfg.n_queries)
        .map(|_| {
            let len = rng.gen_range(qmin..=qmax);
            all.choose_multiple(&mut rng, len).copied().collect()
        })
        .collect();
    let doc_idx: Vec<usize> = (0..cfg.n_docs).collect();
    for q in &queries {
        let need = overlap_needed(q.len());
        for &d in doc_idx.choose_multiple(&mut rng, cfg.planted_docs) {
            let k = rng.gen_range(need..=q.len());
            docs[d].extend(q.choose_multiple(&mut rng, k).copied());
            docs[d].shuffle(&mut rng);
        }
    }

    let did = |i: usize| format!("D{i:04}");
    let qid = |i: usize| format!("Q{i:03}");
    let mut qrels = Qrels::new();
    for (qi, q) in queries.iter().enumerate() {
        let need = overlap_needed(q.len());
        for (di, d) in docs.iter().enumerate() {
            let present: BTreeSet<usize> = d.iter().copied().collect();
            if q.iter().filter(|w| present.contains(w)).count() >= need {
                qrels.set(&qid(qi), &did(di), 1)?;
            }
        }
        if qrels.num_relevant(&qid(qi)) == 0 {
            return bad("a query ended up without relevant documents");
        }
    }

    let mut table = TranslationTable::new("src", "tgt");
    for i in 0..v {
        table.add(&src_words[i], &tgt_words[i], 1.0 - cfg.noise);
        if cfg.noise > 0.0 {
            let others: Vec<usize> = (0..v).filter(|&j| j != i).collect();
            for &j in others.choose_multiple(&mut rng, 2) {
                table.add(&src_words[i], &tgt_words[j], cfg.noise / 2.0);
            }
        }
    }

    let pairs = (0..cfg.parallel_sentences)
        .map(|_| {
            let len = rng.gen_range(3..=8).min(v);
            let idx: Vec<usize> = all.choose_multiple(&mut rng, len).copied().collect();
            let src: Vec<String> = idx.iter().map(|&i| src_words[i].clone()).collect();
            let mut tgt: Vec<String> = idx.iter().map(|&i| tgt_words[i].clone()).collect();
            tgt.shuffle(&mut rng);
            (src, tgt)
        })
        .collect();

    let join = |ids: &[usize], words: &[String]| ids.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ");
    Ok(SyntheticClir {
        corpus: docs
            .iter()
            .enumerate()
            .map(|(i, d)| Record { id: did(i), text: join(d, &tgt_words) })
            .collect(),
        queries: queries
            .iter()
            .enumerate()
            .map(|(i, q)| Record { id: qid(i), text: join(q, &src_words) })
            .collect(),
        qrels,
        table,
        parallel: ParallelCorpus::new(pairs)?,
        src_words,
        tgt_words,
    })
}
