//! End-to-end reranking experiments: data preparation, per-mode training and
//! test-fold evaluation, and the MAT-position comparison table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evalrep::{per_query_ap, per_query_p_at, Qrels, RankedRun, SyntheticClir};
use crate::model::{MartModel, ModelConfig};
use crate::par::ExecMode;
use crate::retrieval::{build_index, retrieve, translate_query, InvertedIndex, Record};
use crate::tensor::Scalar;
use crate::textprep::{preprocess, train_subword_vocab, Stoplist, Vocab};
use crate::trainer::{make_folds, rerank, train, FoldPlan, MatrixMode, RerankData, TrainConfig, TrainOutcome};
use crate::xresource::TranslationTable;

/// Translations kept per query word by the first-stage retriever.
pub const FIRST_STAGE_TRANSLATIONS: usize = 10;

/// The three compared rerankers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RerankMode {
    /// MAT layers fed the translation attention matrix.
    Mart,
    /// MAT layers fed the identity matrix.
    Placebo,
    /// No MAT layers.
    Vanilla,
}

impl RerankMode {
    pub const ALL: [RerankMode; 3] = [RerankMode::Mart, RerankMode::Placebo, RerankMode::Vanilla];

    pub fn as_str(self) -> &'static str {
        match self {
            RerankMode::Mart => "mart",
            RerankMode::Placebo => "placebo",
            RerankMode::Vanilla => "vanilla",
        }
    }

    pub fn matrix(self) -> MatrixMode {
        match self {
            RerankMode::Placebo => MatrixMode::Placebo,
            RerankMode::Mart | RerankMode::Vanilla => MatrixMode::Translation,
        }
    }

    /// The architecture this mode trains: vanilla drops every MAT layer.
    pub fn model_config(self, cfg: &ModelConfig) -> ModelConfig {
        match self {
            RerankMode::Vanilla => cfg.base(),
            RerankMode::Mart | RerankMode::Placebo => cfg.clone(),
        }
    }
}

impl fmt::Display for RerankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RerankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mart" => Ok(RerankMode::Mart),
            "placebo" => Ok(RerankMode::Placebo),
            "vanilla" => Ok(RerankMode::Vanilla),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected mart, placebo or vanilla"
            ))),
        }
    }
}

/// Preprocessed inputs shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Workbench {
    pub queries: BTreeMap<String, Vec<String>>,
    pub docs: HashMap<String, Vec<String>>,
    pub vocab: Vocab,
    pub table: TranslationTable,
    pub qrels: Qrels,
    pub first_stage: RankedRun,
    pub folds: FoldPlan,
}

fn tokenize_records(records: &[Record], stoplist: &Stoplist) -> Vec<(String, Vec<String>)> {
    records.iter().map(|r| (r.id.clone(), preprocess(&r.text, stoplist))).collect()
}

/// Runs table-translated BM25 for every query and keeps the top `depth`.
pub fn first_stage_run(
    index: &InvertedIndex,
    queries: &BTreeMap<String, Vec<String>>,
    table: &TranslationTable,
    depth: usize,
) -> Result<RankedRun> {
    let mut run = RankedRun::new();
    for (qid, words) in queries {
        let wq = translate_query(words, table, FIRST_STAGE_TRANSLATIONS);
        run.insert(qid, retrieve(index, &wq, depth))?;
    }
    Ok(run)
}

impl Workbench {
    /// Tokenizes corpus and queries, learns a subword vocabulary of at most
    /// `vocab_target` pieces, indexes the corpus, runs the first stage to
    /// `depth` and cuts the judged queries into folds.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        corpus: &[Record],
        queries: &[Record],
        qrels: Qrels,
        table: TranslationTable,
        stoplist: &Stoplist,
        vocab_target: usize,
        depth: usize,
        fold_seed: u64,
    ) -> Result<Self> {
        let doc_words = tokenize_records(corpus, stoplist);
        let query_words = tokenize_records(queries, stoplist);
        let all_words: Vec<&str> = doc_words
            .iter()
            .chain(&query_words)
            .flat_map(|(_, ws)| ws.iter().map(String::as_str))
            .collect();
        let vocab = train_subword_vocab(&all_words, vocab_target)?;
        let index = build_index(&doc_words)?;
        let queries: BTreeMap<String, Vec<String>> = query_words.into_iter().collect();
        let first_stage = first_stage_run(&index, &queries, &table, depth)?;
        Workbench::assemble(queries, doc_words.into_iter().collect(), vocab, table, qrels, first_stage, fold_seed)
    }

    /// Wraps already prepared artifacts and cuts the judged queries into folds.
    pub fn assemble(
        queries: BTreeMap<String, Vec<String>>,
        docs: HashMap<String, Vec<String>>,
        vocab: Vocab,
        table: TranslationTable,
        qrels: Qrels,
        first_stage: RankedRun,
        fold_seed: u64,
    ) -> Result<Self> {
        let judged: Vec<String> = queries
            .keys()
            .filter(|q| qrels.num_relevant(q) > 0)
            .cloned()
            .collect();
        let folds = make_folds(&judged, fold_seed)?;
        Ok(Workbench {
            queries,
            docs,
            vocab,
            table,
            qrels,
            first_stage,
            folds,
        })
    }

    pub fn from_synthetic(data: &SyntheticClir, depth: usize, fold_seed: u64) -> Result<Self> {
        // every synthetic word becomes a single piece
        let target = 4 * (data.src_words.len() + data.tgt_words.len()) + 64;
        Workbench::build(
            &data.corpus,
            &data.queries,
            data.qrels.clone(),
            data.table.clone(),
            &Stoplist::default(),
            target,
            depth,
            fold_seed,
        )
    }

    pub fn rerank_data(&self, matrix: MatrixMode, max_len: usize, doc_cap: usize) -> RerankData<'_> {
        RerankData {
            queries: &self.queries,
            docs: &self.docs,
            vocab: &self.vocab,
            table: &self.table,
            matrix,
            max_len,
            doc_cap,
        }
    }
}

/// Small architecture for the synthetic task: d=32, four heads, four
/// layers with the third one MAT. Weights start from scratch, so the
/// initialisation is wider than for a 768-wide encoder.
pub fn synthetic_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        hidden: 32,
        heads: 4,
        layers: 4,
        mat_layers: [3].into(),
        ffn_hidden: 128,
        max_len: 64,
        vocab_size,
        init_std: 0.1,
        ..ModelConfig::default()
    }
}

/// Fine-tuning settings for the synthetic task. Training starts from random
/// weights, so it uses a larger step size and a shorter schedule than the
/// defaults.
pub fn synthetic_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 20,
        patience: 20,
        seed,
        ..TrainConfig::default()
    }
}

/// Test-fold results of one trained reranker.
#[derive(Clone, Debug)]
pub struct RunReport<T: Scalar> {
    pub mode: RerankMode,
    pub mat_layers: BTreeSet<usize>,
    pub fold: usize,
    pub outcome: TrainOutcome<T>,
    pub test_run: RankedRun,
    pub per_query_ap: BTreeMap<String, f64>,
    pub per_query_p10: BTreeMap<String, f64>,
}

impl<T: Scalar> RunReport<T> {
    pub fn map(&self) -> f64 {
        mean(&self.per_query_ap)
    }

    pub fn p10(&self) -> f64 {
        mean(&self.per_query_p10)
    }

    /// Directory name isolating this run's artifacts.
    pub fn tag(&self) -> String {
        run_tag(self.mode, &self.mat_layers, self.fold)
    }
}

fn mean(values: &BTreeMap<String, f64>) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.values().sum::<f64>() / values.len() as f64
    }
}

pub fn run_tag(mode: RerankMode, mat_layers: &BTreeSet<usize>, fold: usize) -> String {
    let layers = if mat_layers.is_empty() {
        "none".to_string()
    } else {
        mat_layers.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    };
    format!("{mode}_L{layers}_f{fold}")
}

/// Fresh model for `mode`: shared tensors come from a vanilla model built
/// with the same seed, translation heads are new.
pub fn initial_model<T: Scalar>(mode: RerankMode, cfg: &ModelConfig, seed: u64) -> Result<MartModel<T>> {
    let cfg = mode.model_config(cfg);
    let base = MartModel::assemble(cfg.base(), seed)?;
    let mut model = MartModel::assemble(cfg, seed)?;
    model.init_from_base(&base)?;
    Ok(model)
}

/// Trains `mode` on fold `fold` and evaluates it on that fold's test queries.
pub fn run_fold<T: Scalar>(
    bench: &Workbench,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mode: RerankMode,
    fold: usize,
    exec: ExecMode,
) -> Result<RunReport<T>> {
    let split = bench
        .folds
        .folds
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} does not exist")))?;
    let model = initial_model::<T>(mode, model_cfg, train_cfg.seed)?;
    let mat_layers = model.config().mat_layers.clone();
    let data = bench.rerank_data(mode.matrix(), model_cfg.max_len, train_cfg.doc_cap);
    log::info!("training {}", run_tag(mode, &mat_layers, fold));
    let outcome = train(model, &data, &bench.qrels, &bench.first_stage, split, train_cfg, exec)?;
    let test_run = rerank(
        &outcome.model,
        &data,
        &bench.first_stage,
        &split.test,
        train_cfg.rerank_depth,
        exec,
    )?;
    let per_query_ap = per_query_ap(&test_run, &bench.qrels, train_cfg.rerank_depth)?;
    let per_query_p10 = per_query_p_at(&test_run, &bench.qrels, 10)?;
    Ok(RunReport {
        mode,
        mat_layers,
        fold,
        outcome,
        test_run,
        per_query_ap,
        per_query_p10,
    })
}

/// One row of the MAT-position comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mat_layers: BTreeSet<usize>,
    pub folds: Vec<usize>,
    pub map: f64,
    pub p10: f64,
    pub best_epoch: f64,
}

/// Trains MART once per entry of `settings` on each listed fold and
/// averages test MAP and P@10 over folds.
pub fn ablate<T: Scalar>(
    bench: &Workbench,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    settings: &[BTreeSet<usize>],
    folds: &[usize],
    exec: ExecMode,
) -> Result<Vec<AblationRow>> {
    if settings.is_empty() || folds.is_empty() {
        return Err(Error::Config("ablation needs at least one layer set and one fold".into()));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for layers in settings {
        let cfg = ModelConfig {
            mat_layers: layers.clone(),
            ..model_cfg.clone()
        };
        let reports = folds
            .iter()
            .map(|&f| run_fold::<T>(bench, &cfg, train_cfg, RerankMode::Mart, f, exec))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ablation_row(layers.clone(), &reports));
    }
    Ok(rows)
}

pub fn ablation_row<T: Scalar>(mat_layers: BTreeSet<usize>, reports: &[RunReport<T>]) -> AblationRow {
    let n = reports.len().max(1) as f64;
    AblationRow {
        mat_layers,
        folds: reports.iter().map(|r| r.fold).collect(),
        map: reports.iter().map(RunReport::map).sum::<f64>() / n,
        p10: reports.iter().map(RunReport::p10).sum::<f64>() / n,
        best_epoch: reports.iter().map(|r| r.outcome.best_epoch as f64).sum::<f64>() / n,
    }
}

/// Tab-separated `mat_layers  folds  MAP  P@10  best_epoch` table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("mat_layers\tfolds\tMAP\tP@10\tbest_epoch\n");
    for r in rows {
        let join = |it: Vec<String>| it.join(",");
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.1}\n",
            join(r.mat_layers.iter().map(usize::to_string).collect()),
            join(r.folds.iter().map(usize::to_string).collect()),
            r.map,
            r.p10,
            r.best_epoch
        ));
    }
    out
}
