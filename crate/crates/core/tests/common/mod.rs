//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. None of these call the code they check.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use mart_core::attnmat::build_mtr;
use mart_core::evalrep::{Qrels, RankedRun, SyntheticClir};
use mart_core::model::{MartModel, ModelConfig};
use mart_core::tensor::{Graph, Tensor};
use mart_core::textprep::{encode_pair, train_subword_vocab, TokenizedSequence, Vocab};
use mart_core::xresource::TranslationTable;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token-level restatement of the matrix construction: entry `(a, b)` is 1
/// on the diagonal, `T(doc word | query word)` when one token comes from a
/// query word and the other from a document word, 0 otherwise; then rows
/// are divided by their sums.
pub fn brute_mtr(seq: &TokenizedSequence, table: &TranslationTable) -> Vec<Vec<f64>> {
    let m = seq.token_ids.len();
    let mut out = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            out[a][b] = if a == b {
                1.0
            } else {
                match (seq.word_index[a], seq.word_index[b]) {
                    (Some(wa), Some(wb)) if wa < seq.m_q && wb >= seq.m_q => table.prob(&seq.words[wa], &seq.words[wb]),
                    (Some(wa), Some(wb)) if wb < seq.m_q && wa >= seq.m_q => table.prob(&seq.words[wb], &seq.words[wa]),
                    _ => 0.0,
                }
            };
        }
    }
    for row in &mut out {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

pub struct MtrInstance {
    pub seq: TokenizedSequence,
    pub table: TranslationTable,
}

/// Random query/document pairs over short words from a tiny alphabet, so
/// the learned subword vocabulary splits many words into several pieces.
/// Some words are out of vocabulary and some repeat.
pub fn random_mtr_instances(n: usize, seed: u64) -> (Vocab, Vec<MtrInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.gen_range(1..=5);
        (0..len).map(|_| *b"abcde".choose(rng).unwrap() as char).collect()
    };
    let training: Vec<String> = (0..300).map(|_| word(&mut rng)).collect();
    let vocab = train_subword_vocab(&training, 20).unwrap();
    let instances = (0..n)
        .map(|_| {
            let mut q: Vec<String> = (0..rng.gen_range(1..=4)).map(|_| word(&mut rng)).collect();
            let d: Vec<String> = (0..rng.gen_range(0..=6)).map(|_| word(&mut rng)).collect();
            if rng.gen_bool(0.2) {
                q.push("xyz".into());
            }
            let mut table = TranslationTable::default();
            for qw in &q {
                for dw in &d {
                    if rng.gen_bool(0.4) {
                        table.add(qw, dw, rng.gen_range(0.01..1.0));
                    }
                }
            }
            // translations in the opposite direction must be ignored
            if let (Some(dw), Some(qw)) = (d.first(), q.first()) {
                table.add(dw, qw, 0.5);
            }
            MtrInstance {
                seq: encode_pair(&q, &d, &vocab),
                table,
            }
        })
        .collect();
    (vocab, instances)
}

/// Precision at each relevant position, recounted from scratch.
pub fn brute_ap(ranking: &[String], relevant: &BTreeSet<String>, cutoff: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let top: Vec<&String> = ranking.iter().take(cutoff).collect();
    let mut total = 0.0;
    for k in 0..top.len() {
        if relevant.contains(top[k]) {
            let hits = top[..=k].iter().filter(|d| relevant.contains(**d)).count();
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

pub fn brute_p_at(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    ranking.iter().take(k).filter(|d| relevant.contains(*d)).count() as f64 / k as f64
}

pub struct RandomRun {
    pub run: RankedRun,
    pub qrels: Qrels,
    pub rankings: BTreeMap<String, Vec<String>>,
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

/// A run whose scores are distinct so the stored order is unambiguous.
pub fn random_run(rng: &mut ChaCha8Rng) -> RandomRun {
    let n_queries = rng.gen_range(1..=6);
    let mut out = RandomRun {
        run: RankedRun::new(),
        qrels: Qrels::new(),
        rankings: BTreeMap::new(),
        relevant: BTreeMap::new(),
    };
    for q in 0..n_queries {
        let qid = format!("q{q}");
        let n_docs = rng.gen_range(0..=30);
        let mut docs: Vec<String> = (0..40).map(|d| format!("d{d}")).collect();
        docs.shuffle(rng);
        let ranked: Vec<String> = docs[..n_docs].to_vec();
        let mut rel: BTreeSet<String> = docs.iter().filter(|_| rng.gen_bool(0.2)).cloned().collect();
        if q == 0 && rel.is_empty() {
            rel.insert(docs[0].clone());
        }
        for d in &rel {
            out.qrels.set(&qid, d, 1).unwrap();
        }
        if rng.gen_bool(0.3) && !rel.contains(&docs[39]) {
            out.qrels.set(&qid, &docs[39], 0).unwrap();
        }
        let scored = ranked.iter().enumerate().map(|(i, d)| (d.clone(), 100.0 - i as f64)).collect();
        out.run.insert(&qid, scored).unwrap();
        out.rankings.insert(qid.clone(), ranked);
        out.relevant.insert(qid, rel);
    }
    out
}

/// Mean of `metric` over queries that have at least one relevant document.
pub fn brute_mean(r: &RandomRun, metric: impl Fn(&[String], &BTreeSet<String>) -> f64) -> Option<f64> {
    let vals: Vec<f64> = r
        .rankings
        .iter()
        .filter(|(q, _)| !r.relevant[*q].is_empty())
        .map(|(q, ranking)| metric(ranking, &r.relevant[q]))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores every document by rescanning the raw corpus for each term.
pub fn exhaustive_bm25(corpus: &[(String, Vec<String>)], groups: &[Vec<(String, f64)>]) -> HashMap<String, f64> {
    let (k1, b) = (1.2, 0.75);
    let n = corpus.len() as f64;
    let avgdl = corpus.iter().map(|(_, w)| w.len() as f64).sum::<f64>() / n;
    let mut scores = HashMap::new();
    for (id, words) in corpus {
        let mut total = 0.0;
        for group in groups {
            for (term, weight) in group {
                let df = corpus.iter().filter(|(_, w)| w.contains(term)).count() as f64;
                let idf = f64::max(0.0, ((n - df + 0.5) / (df + 0.5)).ln());
                let tf = words.iter().filter(|w| *w == term).count() as f64;
                let dl = words.len() as f64;
                total += weight * idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
        }
        scores.insert(id.clone(), total / groups.len().max(1) as f64);
    }
    scores
}

/// Recomputes relevance from the generated text: a document is relevant
/// when it holds at least half (rounded up) of the query words' true
/// translations.
pub fn synthetic_qrels_oracle(data: &SyntheticClir) -> BTreeMap<String, BTreeSet<String>> {
    let truth: HashMap<&str, &str> = data
        .src_words
        .iter()
        .zip(&data.tgt_words)
        .map(|(s, t)| (s.as_str(), t.as_str()))
        .collect();
    let mut out = BTreeMap::new();
    for q in &data.queries {
        let words: Vec<&str> = q.text.split(' ').collect();
        let need = (words.len() + 1) / 2;
        let rel: BTreeSet<String> = data
            .corpus
            .iter()
            .filter(|d| {
                let present: BTreeSet<&str> = d.text.split(' ').collect();
                words.iter().filter(|w| present.contains(truth[**w])).count() >= need
            })
            .map(|d| d.id.clone())
            .collect();
        out.insert(q.id.clone(), rel);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub struct GradientCheck {
    pub checked: usize,
    /// Entries with absolute difference >= 1e-9 and relative error >= 1e-4.
    pub failed: usize,
    pub max_abs: f64,
    /// Largest relative error among entries with absolute difference >= 1e-9.
    pub max_rel: f64,
}

/// Compares backpropagated and central-difference gradients over every
/// parameter entry of a small MAT model.
pub fn model_gradient_check() -> GradientCheck {
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        layers: 3,
        mat_layers: [2].into(),
        ffn_hidden: 12,
        max_len: 12,
        vocab_size: 12,
        init_std: 0.5,
        ..ModelConfig::default()
    };
    let mut model = MartModel::<f64>::assemble(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            for x in p.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let vocab = Vocab::from_parts(["a", "b", "c", "d", "e", "f", "g", "h"].map(String::from).to_vec(), vec![]).unwrap();
    let mut table = TranslationTable::default();
    table.add("a", "c", 0.6);
    table.add("b", "e", 0.3);
    let pos = encode_pair(&["a", "b"], &["c", "d", "e"], &vocab);
    let neg = encode_pair(&["a", "b"], &["f", "g", "h", "d"], &vocab);
    let (mp, mn) = (build_mtr(&pos, &table), build_mtr(&neg, &table));
    let loss_of = |model: &MartModel<f64>| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let sp = model.score_on(&mut g, &b, &[pos.clone()], &[mp.clone()], None).unwrap();
        let sn = model
            .score_on(&mut g, &b, &[neg.clone(), pos.clone()], &[mn.clone(), mp.clone()], None)
            .unwrap();
        let diff = g.sub(sn, sp).unwrap();
        let loss = g.softplus(diff);
        let loss = g.sum(loss);
        let mut grads = g.backward(loss).unwrap();
        let value = g.value(loss).item();
        (value, b.params.iter().map(|&v| grads.take(v)).collect())
    };
    let (_, grads) = loss_of(&model);
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    let step = 1e-6;
    let mut out = GradientCheck {
        checked: 0,
        failed: 0,
        max_abs: 0.0,
        max_rel: 0.0,
    };
    for (pi, name) in names.iter().enumerate() {
        let n = model.param(name).unwrap().len();
        for k in 0..n {
            let analytic = grads[pi].as_ref().map_or(0.0, |t| t.data()[k]);
            let orig = model.param(name).unwrap().data()[k];
            model.param_mut(name).unwrap().data_mut()[k] = orig + step;
            let up = loss_of(&model).0;
            model.param_mut(name).unwrap().data_mut()[k] = orig - step;
            let down = loss_of(&model).0;
            model.param_mut(name).unwrap().data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let abs = (analytic - fd).abs();
            out.max_abs = out.max_abs.max(abs);
            if abs >= 1e-9 {
                let e = rel_err(analytic, fd);
                out.max_rel = out.max_rel.max(e);
                if e >= 1e-4 {
                    out.failed += 1;
                }
            }
            out.checked += 1;
        }
    }
    assert_eq!(out.checked, model.num_params());
    out
}
