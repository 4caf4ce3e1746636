use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{epoch_seed, prepare_doc_input, sample_pairs, Adam, EarlyStopping, Fold, TrainConfig, TrainPair};
use crate::attnmat::{build_mtr, build_placebo, TranslationAttentionMatrix};
use crate::error::{Error, Result};
use crate::evalrep::{map_at, Qrels, RankedRun};
use crate::model::{Dropout, MartModel};
use crate::par::{try_map_indexed, ExecMode};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::textprep::{TokenizedSequence, Vocab};
use crate::xresource::TranslationTable;

/// Which translation attention matrix MAT layers receive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixMode {
    Translation,
    /// Identity matrix, so the translation head sees no cross-word links.
    Placebo,
}

/// Everything needed to turn a `(query, document)` id pair into model input.
pub struct RerankData<'a> {
    pub queries: &'a BTreeMap<String, Vec<String>>,
    pub docs: &'a HashMap<String, Vec<String>>,
    pub vocab: &'a Vocab,
    pub table: &'a TranslationTable,
    pub matrix: MatrixMode,
    pub max_len: usize,
    pub doc_cap: usize,
}

type Inputs = (Vec<TokenizedSequence>, Vec<TranslationAttentionMatrix>);

impl RerankData<'_> {
    pub fn inputs(&self, qid: &str, did: &str) -> Result<Inputs> {
        let q = self
            .queries
            .get(qid)
            .ok_or_else(|| Error::InvalidInput(format!("unknown query {qid}")))?;
        let d = self
            .docs
            .get(did)
            .ok_or_else(|| Error::InvalidInput(format!("unknown document {did}")))?;
        let segments = prepare_doc_input(q, d, self.vocab, self.max_len, self.doc_cap)?;
        let mtrs = segments
            .iter()
            .map(|s| match self.matrix {
                MatrixMode::Translation => Ok(build_mtr(s, self.table)),
                MatrixMode::Placebo => build_placebo(s.len()),
            })
            .collect::<Result<_>>()?;
        Ok((segments, mtrs))
    }
}

fn pair_dropout(rate: f64, seed: u64, index: usize) -> Dropout {
    Dropout::new(rate, ChaCha8Rng::seed_from_u64(epoch_seed(seed, index)))
}

/// Sums the pairwise loss and its parameter gradients over `pairs`,
/// evaluated `micro_batch` pairs per graph. Micro-batches may run in
/// parallel; their gradients are added in pair order. Pair `i` draws its
/// dropout masks from `dropout_seed` and `i`, so the grouping does not
/// change the result.
pub fn accumulate_gradients<T: Scalar>(
    model: &MartModel<T>,
    data: &RerankData<'_>,
    pairs: &[TrainPair],
    micro_batch: usize,
    dropout_seed: Option<u64>,
    mode: ExecMode,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if micro_batch == 0 {
        return Err(Error::Config("micro_batch must be positive".into()));
    }
    let chunks: Vec<&[TrainPair]> = pairs.chunks(micro_batch).collect();
    let rate = model.config().dropout;
    let partials = try_map_indexed(mode, &chunks, |ci, chunk| -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let mut total = None;
        for (j, pair) in chunk.iter().enumerate() {
            let mut drop = dropout_seed.map(|s| pair_dropout(rate, s, ci * micro_batch + j));
            let (ps, pm) = data.inputs(&pair.qid, &pair.positive)?;
            let (ns, nm) = data.inputs(&pair.qid, &pair.negative)?;
            let s_pos = model.score_on(&mut g, &b, &ps, &pm, drop.as_mut())?;
            let s_neg = model.score_on(&mut g, &b, &ns, &nm, drop.as_mut())?;
            let diff = g.sub(s_neg, s_pos)?;
            let loss = g.softplus(diff);
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let loss = g.sum(total.expect("chunks are non-empty"));
        let mut grads = g.backward(loss)?;
        let value = g.value(loss).item().as_f64();
        let tensors = b
            .params
            .iter()
            .zip(model.params())
            .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, tensors))
    })?;
    let mut loss = 0.0;
    let mut sum: Vec<Tensor<T>> = model.params().iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
    for (l, grads) in partials {
        loss += l;
        for (acc, g) in sum.iter_mut().zip(&grads) {
            acc.add_assign(g)?;
        }
    }
    Ok((loss, sum))
}

/// Scores the top `depth` first-stage documents of each query and ranks
/// them by model score.
pub fn rerank<T: Scalar>(
    model: &MartModel<T>,
    data: &RerankData<'_>,
    first_stage: &RankedRun,
    qids: &[String],
    depth: usize,
    mode: ExecMode,
) -> Result<RankedRun> {
    let items: Vec<(&str, &str)> = qids
        .iter()
        .filter_map(|q| first_stage.get(q).map(|r| (q.as_str(), r)))
        .flat_map(|(q, r)| r.iter().take(depth).map(move |(d, _)| (q, d.as_str())))
        .collect();
    let scores = try_map_indexed(mode, &items, |_, &(q, d)| -> Result<f64> {
        let (segments, mtrs) = data.inputs(q, d)?;
        Ok(model.score_last_int(&segments, &mtrs)?.as_f64())
    })?;
    let mut grouped: BTreeMap<&str, Vec<(String, f64)>> = BTreeMap::new();
    for (&(q, d), s) in items.iter().zip(scores) {
        grouped.entry(q).or_default().push((d.to_owned(), s));
    }
    let mut run = RankedRun::new();
    for (q, ranking) in grouped {
        run.insert(q, ranking)?;
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
    pub wall_secs: f64,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_map,wall_secs\n");
    for e in log {
        out.push_str(&format!("{},{:.6},{:.6},{:.3}\n", e.epoch, e.train_loss, e.val_map, e.wall_secs));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the epoch with the best validation MAP.
    pub model: MartModel<T>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub log: Vec<EpochLog>,
    pub optimizer_steps: u64,
}

/// Fine-tunes on the fold's training queries with validation-MAP early
/// stopping. Each epoch resamples one set of pairs, shuffles it, and takes
/// one Adam step per `batch_size` pairs on the mean gradient.
pub fn train<T: Scalar>(
    mut model: MartModel<T>,
    data: &RerankData<'_>,
    qrels: &Qrels,
    first_stage: &RankedRun,
    fold: &Fold,
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, p)| p.shape().to_vec()).collect();
    let mut adam = Adam::new(shapes.iter().map(Vec::as_slice), cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let seed = epoch_seed(cfg.seed, epoch);
        let mut pairs = sample_pairs(
            qrels,
            first_stage,
            &fold.train,
            seed,
            cfg.negatives_per_positive,
            cfg.negative_pool,
        );
        if pairs.is_empty() {
            return Err(Error::InvalidInput("no training pairs could be sampled".into()));
        }
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut loss_sum = 0.0;
        for (step, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let dropout_seed = epoch_seed(seed, step + 1);
            let (loss, mut grads) =
                accumulate_gradients(&model, data, batch, cfg.micro_batch, Some(dropout_seed), mode)?;
            let inv = T::of(1.0 / batch.len() as f64);
            grads.iter_mut().for_each(|g| g.scale_in_place(inv));
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss;
        }
        let val_run = rerank(&model, data, first_stage, &fold.validation, cfg.rerank_depth, mode)?;
        let val_map = map_at(&val_run, qrels, cfg.rerank_depth)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / pairs.len() as f64,
            val_map,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, validation MAP {:.4}",
            entry.train_loss,
            entry.val_map
        );
        log.push(entry);
        if stopper.observe(epoch, val_map) {
            best = model.clone();
        }
        if stopper.should_stop(epoch) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (best_epoch, best_val_map) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_val_map,
        log,
        optimizer_steps: adam.steps_taken(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    struct Fixture {
        queries: BTreeMap<String, Vec<String>>,
        docs: HashMap<String, Vec<String>>,
        vocab: Vocab,
        table: TranslationTable,
    }

    fn fixture() -> Fixture {
        let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let queries = [("q1", "a b"), ("q2", "b c")]
            .iter()
            .map(|(k, v)| (k.to_string(), split(v)))
            .collect();
        let docs = [("d1", "x y"), ("d2", "y z w"), ("d3", "w"), ("d4", "z x x")]
            .iter()
            .map(|(k, v)| (k.to_string(), split(v)))
            .collect();
        let vocab = Vocab::from_parts(["a", "b", "c", "w", "x", "y", "z"].map(String::from).to_vec(), vec![]).unwrap();
        let mut table = TranslationTable::default();
        table.add("a", "x", 0.7);
        table.add("b", "y", 0.9);
        table.add("c", "z", 0.6);
        Fixture {
            queries,
            docs,
            vocab,
            table,
        }
    }

    fn data(f: &Fixture, matrix: MatrixMode) -> RerankData<'_> {
        RerankData {
            queries: &f.queries,
            docs: &f.docs,
            vocab: &f.vocab,
            table: &f.table,
            matrix,
            max_len: 16,
            doc_cap: 800,
        }
    }

    fn model<T: Scalar>() -> MartModel<T> {
        MartModel::assemble(
            ModelConfig {
                hidden: 8,
                heads: 2,
                layers: 3,
                mat_layers: [2].into(),
                ffn_hidden: 16,
                max_len: 16,
                vocab_size: 12,
                init_std: 0.3,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn pairs() -> Vec<TrainPair> {
        let p = |q: &str, a: &str, b: &str| TrainPair {
            qid: q.into(),
            positive: a.into(),
            negative: b.into(),
        };
        vec![p("q1", "d1", "d3"), p("q2", "d2", "d1"), p("q1", "d4", "d2"), p("q2", "d4", "d3"), p("q1", "d1", "d2")]
    }

    #[test]
    fn grouping_does_not_change_gradients() {
        let f = fixture();
        let d = data(&f, MatrixMode::Translation);
        let m = model::<f64>();
        let (l1, g1) = accumulate_gradients(&m, &d, &pairs(), 2, Some(3), ExecMode::Sequential).unwrap();
        let (l2, g2) = accumulate_gradients(&m, &d, &pairs(), 5, Some(3), ExecMode::Parallel).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn placebo_inputs_are_identity() {
        let f = fixture();
        let (_, mtrs) = data(&f, MatrixMode::Placebo).inputs("q1", "d1").unwrap();
        assert!(mtrs[0].is_identity());
        let (_, mtrs) = data(&f, MatrixMode::Translation).inputs("q1", "d1").unwrap();
        assert!(!mtrs[0].is_identity());
        assert!(data(&f, MatrixMode::Placebo).inputs("q9", "d1").is_err());
    }

    #[test]
    fn one_small_step_lowers_the_loss() {
        let f = fixture();
        let d = data(&f, MatrixMode::Translation);
        let mut m = model::<f64>();
        let batch = &pairs()[..2];
        let (before, grads) = accumulate_gradients(&m, &d, batch, 2, None, ExecMode::Sequential).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let shapes: Vec<Vec<usize>> = m.params().iter().map(|(_, p)| p.shape().to_vec()).collect();
        let mut adam = Adam::new(shapes.iter().map(Vec::as_slice), &cfg);
        adam.step(m.params_mut(), &grads).unwrap();
        let (after, _) = accumulate_gradients(&m, &d, batch, 2, None, ExecMode::Sequential).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn rerank_orders_candidates() {
        let f = fixture();
        let d = data(&f, MatrixMode::Translation);
        let m = model::<f32>();
        let mut fs = RankedRun::new();
        fs.insert("q1", vec![("d1".into(), 3.0), ("d2".into(), 2.0), ("d3".into(), 1.0)]).unwrap();
        let run = rerank(&m, &d, &fs, &["q1".to_string(), "q2".to_string()], 2, ExecMode::Parallel).unwrap();
        assert_eq!(run.len(), 1);
        let r = run.get("q1").unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[0].1 >= r[1].1);
    }

    #[test]
    fn training_loop_steps_and_logs() {
        let f = fixture();
        let d = data(&f, MatrixMode::Translation);
        let mut qrels = Qrels::new();
        qrels.set("q1", "d1", 1).unwrap();
        qrels.set("q2", "d2", 1).unwrap();
        let mut fs = RankedRun::new();
        for q in ["q1", "q2"] {
            fs.insert(q, vec![("d1".into(), 1.0), ("d2".into(), 0.9), ("d3".into(), 0.8), ("d4".into(), 0.7)])
                .unwrap();
        }
        let fold = Fold {
            train: vec!["q1".into(), "q2".into()],
            validation: vec!["q1".into()],
            test: vec!["q2".into()],
        };
        let cfg = TrainConfig {
            epochs: 3,
            patience: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let out = train(model::<f32>(), &d, &qrels, &fs, &fold, &cfg, ExecMode::Sequential).unwrap();
        assert!(!out.log.is_empty() && out.log.len() <= 3);
        // two pairs per epoch fit in one batch of 16
        assert_eq!(out.optimizer_steps, out.log.len() as u64);
        assert!(epoch_log_csv(&out.log).starts_with("epoch,train_loss,val_map,wall_secs\n1,"));
        let empty = Fold {
            train: vec![],
            ..fold
        };
        assert!(train(model::<f32>(), &d, &qrels, &fs, &empty, &cfg, ExecMode::Sequential).is_err());
    }
}
