//! Fine-tuning protocol: input segmentation, cross-validation folds, pair
//! sampling, the pairwise loss, Adam and early stopping.

mod fit;

pub use fit::{
    accumulate_gradients, epoch_log_csv, rerank, train, EpochLog, MatrixMode, RerankData, TrainOutcome,
};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalrep::{Qrels, RankedRun};
use crate::kv::KvMap;
use crate::tensor::{Scalar, Tensor};
use crate::textprep::{encode_pair, TokenizedSequence, Vocab};

/// Hyperparameters of the fine-tuning loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub patience: usize,
    pub micro_batch: usize,
    pub batch_size: usize,
    pub doc_cap: usize,
    pub rerank_depth: usize,
    pub negative_pool: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            patience: 20,
            micro_batch: 2,
            batch_size: 16,
            doc_cap: 800,
            rerank_depth: 100,
            negative_pool: 500,
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.epochs == 0 || self.micro_batch == 0 || self.batch_size == 0 {
            return bad("epochs, micro_batch and batch_size must be positive");
        }
        if self.batch_size % self.micro_batch != 0 {
            return bad("batch_size must be a multiple of micro_batch");
        }
        if self.doc_cap == 0 || self.rerank_depth == 0 || self.negative_pool == 0 || self.negatives_per_positive == 0 {
            return bad("doc_cap, rerank_depth, negative_pool and negatives_per_positive must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr", self.lr);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("epochs", self.epochs);
        kv.set("patience", self.patience);
        kv.set("micro_batch", self.micro_batch);
        kv.set("batch_size", self.batch_size);
        kv.set("doc_cap", self.doc_cap);
        kv.set("rerank_depth", self.rerank_depth);
        kv.set("negative_pool", self.negative_pool);
        kv.set("negatives_per_positive", self.negatives_per_positive);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: kv.parsed_or("lr", d.lr)?,
            beta1: kv.parsed_or("beta1", d.beta1)?,
            beta2: kv.parsed_or("beta2", d.beta2)?,
            adam_eps: kv.parsed_or("adam_eps", d.adam_eps)?,
            epochs: kv.parsed_or("epochs", d.epochs)?,
            patience: kv.parsed_or("patience", d.patience)?,
            micro_batch: kv.parsed_or("micro_batch", d.micro_batch)?,
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            doc_cap: kv.parsed_or("doc_cap", d.doc_cap)?,
            rerank_depth: kv.parsed_or("rerank_depth", d.rerank_depth)?,
            negative_pool: kv.parsed_or("negative_pool", d.negative_pool)?,
            negatives_per_positive: kv.parsed_or("negatives_per_positive", d.negatives_per_positive)?,
            seed: kv.parsed_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Encodes a query–document pair, truncating the document to `doc_cap`
/// words. When the result exceeds `max_len` tokens the document words are
/// split into two halves (the first takes the extra word), each paired with
/// the full query. A half that still overflows loses trailing words.
pub fn prepare_doc_input<S: AsRef<str>>(
    query: &[S],
    doc: &[S],
    vocab: &Vocab,
    max_len: usize,
    doc_cap: usize,
) -> Result<Vec<TokenizedSequence>> {
    let query_only = encode_pair(query, &[], vocab).len();
    if query_only > max_len {
        return Err(Error::SequenceTooLong {
            len: query_only,
            max: max_len,
        });
    }
    let doc = &doc[..doc.len().min(doc_cap)];
    let piece_counts: Vec<usize> = doc.iter().map(|w| vocab.encode_word(w.as_ref()).len()).collect();
    let total = query_only + piece_counts.iter().sum::<usize>();
    if total <= max_len {
        return Ok(vec![encode_pair(query, doc, vocab)]);
    }
    let half = doc.len().div_ceil(2);
    let fit = |range: std::ops::Range<usize>| {
        let mut used = query_only;
        let mut end = range.start;
        while end < range.end && used + piece_counts[end] <= max_len {
            used += piece_counts[end];
            end += 1;
        }
        if end < range.end {
            log::debug!("dropping {} trailing words of a document half", range.end - end);
        }
        encode_pair(query, &doc[range.start..end], vocab)
    };
    Ok(vec![fit(0..half), fit(half..doc.len())])
}

/// One cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

pub const NUM_FOLDS: usize = 5;

/// Shuffles the query ids and cuts them into five chunks whose sizes
/// differ by at most one (earlier chunks take the remainder). Fold `f`
/// tests on chunk `f`, validates on chunk `f + 1 mod 5` and trains on the rest.
pub fn make_folds(query_ids: &[String], seed: u64) -> Result<FoldPlan> {
    let mut ids: Vec<String> = query_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < NUM_FOLDS {
        return Err(Error::InvalidInput(format!(
            "{NUM_FOLDS}-fold cross-validation needs at least {NUM_FOLDS} distinct queries, got {}",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / NUM_FOLDS, ids.len() % NUM_FOLDS);
    let mut chunks = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for c in 0..NUM_FOLDS {
        let size = base + usize::from(c < extra);
        chunks.push(ids[start..start + size].to_vec());
        start += size;
    }
    let folds = (0..NUM_FOLDS)
        .map(|f| {
            let v = (f + 1) % NUM_FOLDS;
            Fold {
                test: chunks[f].clone(),
                validation: chunks[v].clone(),
                train: (0..NUM_FOLDS)
                    .filter(|&c| c != f && c != v)
                    .flat_map(|c| chunks[c].iter().cloned())
                    .collect(),
            }
        })
        .collect();
    Ok(FoldPlan { folds })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainPair {
    pub qid: String,
    pub positive: String,
    pub negative: String,
}

/// Pairs every judged-relevant document of each query with
/// `negatives_per_positive` documents drawn without replacement from the
/// non-relevant part of the query's top `pool` first-stage results.
pub fn sample_pairs(
    qrels: &Qrels,
    first_stage: &RankedRun,
    qids: &[String],
    seed: u64,
    negatives_per_positive: usize,
    pool: usize,
) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for qid in qids {
        let positives = qrels.relevant(qid);
        if positives.is_empty() {
            continue;
        }
        let candidates: Vec<&str> = first_stage
            .get(qid)
            .unwrap_or(&[])
            .iter()
            .take(pool)
            .map(|(d, _)| d.as_str())
            .filter(|d| !positives.contains(d))
            .collect();
        if candidates.is_empty() {
            log::warn!("query {qid} has no negative candidates; skipped");
            continue;
        }
        for pos in &positives {
            for neg in candidates.choose_multiple(&mut rng, negatives_per_positive) {
                pairs.push(TrainPair {
                    qid: qid.clone(),
                    positive: (*pos).to_owned(),
                    negative: (*neg).to_owned(),
                });
            }
        }
    }
    pairs
}

/// `−log softmax(s_pos)` over the pair, i.e. `ln(1 + e^(s_neg − s_pos))`.
pub fn pairwise_ce_loss(s_pos: f64, s_neg: f64) -> f64 {
    let x = s_neg - s_pos;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, cfg: &TrainConfig) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *x -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Stops once `patience` epochs pass without a strictly better metric.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None }
    }

    /// Records the metric of `epoch`; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = self.best.map_or(true, |(_, b)| metric > b);
        if improved {
            self.best = Some((epoch, metric));
        }
        improved
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(e, _)| epoch - e >= self.patience)
    }
}

/// Seed for epoch-dependent sampling.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Queries appearing in the qrels with at least one relevant document.
pub fn judged_queries(qrels: &Qrels) -> Vec<String> {
    let set: HashSet<&str> = qrels.query_ids().filter(|q| qrels.num_relevant(q) > 0).collect();
    let mut v: Vec<String> = set.into_iter().map(String::from).collect();
    v.sort();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn letters_vocab() -> Vocab {
        let pieces = (b'a'..=b'z').map(|c| (c as char).to_string()).collect();
        Vocab::from_parts(pieces, vec![]).unwrap()
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| ((b'a' + (i % 26) as u8) as char).to_string()).collect()
    }

    #[test]
    fn document_truncation_and_split() {
        let v = letters_vocab();
        let q = words(20);
        let segs = prepare_doc_input(&q, &words(300), &v, 512, 800).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].m_d, 300);
        let segs = prepare_doc_input(&q, &words(800), &v, 512, 800).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].m_d, segs[1].m_d), (400, 400));
        assert!(segs.iter().all(|s| s.len() <= 512 && s.m_q == 20));
        let segs = prepare_doc_input(&q, &words(1000), &v, 5000, 800).unwrap();
        assert_eq!(segs[0].m_d, 800);
        let segs = prepare_doc_input(&q, &words(801), &v, 512, 1000).unwrap();
        assert_eq!((segs[0].m_d, segs[1].m_d), (401, 400));
    }

    #[test]
    fn oversized_halves_are_trimmed() {
        let v = letters_vocab();
        let segs = prepare_doc_input(&words(2), &words(30), &v, 10, 800).unwrap();
        assert!(segs.iter().all(|s| s.len() == 10 && s.m_d == 5));
        assert!(prepare_doc_input(&words(20), &words(3), &v, 10, 800).is_err());
    }

    #[test]
    fn folds_partition() {
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let plan = make_folds(&ids, 7).unwrap();
        assert_eq!(plan.folds.len(), 5);
        let mut tests: Vec<String> = Vec::new();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.validation.len(), f.test.len()), (6, 2, 2));
            let all: HashSet<&String> = f.train.iter().chain(&f.validation).chain(&f.test).collect();
            assert_eq!(all.len(), 10);
            tests.extend(f.test.iter().cloned());
        }
        tests.sort();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(tests, sorted);
        assert_eq!(make_folds(&ids, 7).unwrap(), plan);
        assert_ne!(make_folds(&ids, 8).unwrap(), plan);
        assert!(make_folds(&ids[..4], 7).is_err());
    }

    #[test]
    fn uneven_fold_sizes() {
        let ids: Vec<String> = (0..12).map(|i| format!("q{i:02}")).collect();
        let plan = make_folds(&ids, 1).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, [3, 3, 2, 2, 2]);
    }

    fn run_with(qid: &str, docs: &[&str]) -> RankedRun {
        let mut run = RankedRun::new();
        run.insert(
            qid,
            docs.iter().enumerate().map(|(i, d)| (d.to_string(), -(i as f64))).collect(),
        )
        .unwrap();
        run
    }

    #[test]
    fn pair_sampling() {
        let docs: Vec<String> = (0..500).map(|i| format!("d{i:03}")).collect();
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        let run = run_with("q", &refs);
        let mut qrels = Qrels::new();
        qrels.set("q", "d007", 1).unwrap();
        let qids = vec!["q".to_string()];
        let pairs = sample_pairs(&qrels, &run, &qids, 3, 1, 500);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].positive, "d007");
        assert_ne!(pairs[0].negative, "d007");
        assert_eq!(sample_pairs(&qrels, &run, &qids, 3, 1, 500), pairs);
        // a pool made only of positives yields nothing
        let only = run_with("q", &["d007"]);
        assert!(sample_pairs(&qrels, &only, &qids, 3, 1, 500).is_empty());
        for s in 0..20 {
            for p in sample_pairs(&qrels, &run, &qids, s, 3, 500) {
                assert_ne!(p.negative, "d007");
            }
        }
    }

    #[test]
    fn loss_values() {
        assert!((pairwise_ce_loss(0.3, 0.3) - 2f64.ln()).abs() < 1e-15);
        assert!((pairwise_ce_loss(1.0, 0.0) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((pairwise_ce_loss(1.0, 0.0) - 0.3133).abs() < 1e-4);
        assert!(pairwise_ce_loss(1e4, 0.0) < 1e-300);
        assert!((pairwise_ce_loss(0.0, 1e4) - 1e4).abs() < 1e-9);
        assert!((pairwise_ce_loss(5.5, 2.25) - pairwise_ce_loss(105.5, 102.25)).abs() < 1e-12);
    }

    #[test]
    fn adam_behaviour() {
        let cfg = TrainConfig::default();
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let shapes: Vec<Vec<usize>> = p.iter().map(|t| t.shape().to_vec()).collect();
        let mut adam = Adam::new(shapes.iter().map(Vec::as_slice), &cfg);
        adam.step(p.iter_mut(), &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        adam.step(p.iter_mut(), &[Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap()]).unwrap();
        assert_eq!(adam.steps_taken(), 2);
        let mut fresh = vec![Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap()];
        let mut a = Adam::new([&[1usize][..]], &cfg);
        a.step(fresh.iter_mut(), &[Tensor::from_f64(&[1], &[0.7]).unwrap()]).unwrap();
        assert!((fresh[0].data()[0] + 2e-5).abs() < 1e-10);
        assert!(a.step(fresh.iter_mut(), &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn early_stopping_fires_at_patience() {
        let mut es = EarlyStopping::new(20);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let metric = if epoch <= 7 { epoch as f64 } else { 1.0 };
            es.observe(epoch, metric);
            if es.should_stop(epoch) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(27));
        assert_eq!(es.best(), Some((7, 7.0)));
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 25,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut kv = cfg.to_kv();
        kv.set("batch_size", 15);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }
}
