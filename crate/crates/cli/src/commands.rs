use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mart_core::attnmat::build_mtr;
use mart_core::evalrep::{
    gen_synthetic_clir, layer_similarity_report, paired_t_test, per_query_ap, per_query_p_at, Qrels, RankedRun,
};
use mart_core::experiment::{ablation_row, ablation_table, first_stage_run, run_fold, RunReport, Workbench};
use mart_core::kv::KvMap;
use mart_core::model::MartModel;
use mart_core::par::ExecMode;
use mart_core::retrieval::{build_index, read_records, write_records, InvertedIndex, Record};
use mart_core::tensor::Scalar;
use mart_core::textprep::{preprocess, train_subword_vocab, Vocab};
use mart_core::trainer::{epoch_log_csv, prepare_doc_input};
use mart_core::xresource::{
    estimate_model1, load_dictionary, load_lexical_table, load_parallel_corpus, table_from_dictionary,
    table_from_embeddings, TranslationTable, WordEmbeddingSet,
};

use crate::config::ExperimentConfig;
use crate::meta::Stage;
use crate::UsageError;

const EVAL_CUTOFF: usize = 100;
const SIGNIFICANCE: f64 = 0.05;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn tokenized(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    Ok(read_records(path)?
        .into_iter()
        .map(|r| (r.id, r.text.split_whitespace().map(String::from).collect()))
        .collect())
}

pub fn synth(cfg: &ExperimentConfig) -> Result<()> {
    let scfg = cfg.synth()?;
    let names = ["corpus.jsonl", "queries.jsonl", "qrels.txt", "table.tsv", "parallel.tsv"];
    let outputs: Vec<PathBuf> = names.iter().map(|n| cfg.output(n)).collect();
    let mut settings = cfg.kv.section("synth");
    settings.set("seed", cfg.seed);
    let stage = Stage::new("synth", &settings, &[], outputs.clone())?;
    stage.run(|| {
        let data = gen_synthetic_clir(&scfg)?;
        write_records(&outputs[0], &data.corpus)?;
        write_records(&outputs[1], &data.queries)?;
        data.qrels.save(&outputs[2])?;
        data.table.save(&outputs[3])?;
        write(&outputs[4], &data.parallel.to_tsv())?;
        log::info!("{} documents, {} queries", data.corpus.len(), data.queries.len());
        Ok(())
    })?;
    Ok(())
}

pub fn prep(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = cfg.input("corpus")?;
    let queries = cfg.input("queries")?;
    let outputs = vec![
        cfg.output("corpus.prep.jsonl"),
        cfg.output("queries.prep.jsonl"),
        cfg.output("vocab.txt"),
    ];
    let settings = cfg.kv.subset(&["stoplist", "vocab_target"]);
    let mut inputs = vec![corpus.as_path(), queries.as_path()];
    let stop_path = cfg.optional_input("stoplist").ok().flatten();
    if let Some(p) = &stop_path {
        inputs.push(p);
    }
    let stage = Stage::new("prep", &settings, &inputs, outputs.clone())?;
    let stoplist = cfg.stoplist()?;
    let target: usize = cfg.get("vocab_target", 30_000)?;
    stage.run(|| {
        let clean = |path: &Path| -> Result<Vec<Record>> {
            Ok(read_records(path)?
                .into_iter()
                .map(|r| Record {
                    text: preprocess(&r.text, &stoplist).join(" "),
                    id: r.id,
                })
                .collect())
        };
        let (docs, qs) = (clean(&corpus)?, clean(&queries)?);
        let words: Vec<&str> = docs
            .iter()
            .chain(&qs)
            .flat_map(|r| r.text.split_whitespace())
            .collect();
        let vocab = train_subword_vocab(&words, target)?;
        write_records(&outputs[0], &docs)?;
        write_records(&outputs[1], &qs)?;
        vocab.save(&outputs[2])?;
        log::info!("vocabulary of {} pieces", vocab.len());
        Ok(())
    })?;
    Ok(())
}

pub fn table(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.output("table.tsv");
    let settings = cfg.kv.subset(&["em_iterations", "embedding_k", "src_lang", "tgt_lang"]);
    let (kind, inputs) = if let Some(p) = cfg.optional_input("parallel")? {
        ("parallel", vec![p])
    } else if let Some(p) = cfg.optional_input("dictionary")? {
        ("dictionary", vec![p])
    } else if cfg.kv.contains("src_embeddings") {
        ("embeddings", vec![cfg.input("src_embeddings")?, cfg.input("tgt_embeddings")?])
    } else {
        bail!(UsageError("table needs parallel, dictionary or src_embeddings/tgt_embeddings".into()));
    };
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let stage = Stage::new(&format!("table-{kind}"), &settings, &refs, vec![out.clone()])?;
    let iterations: usize = cfg.get("em_iterations", 10)?;
    let k: usize = cfg.get("embedding_k", 5)?;
    stage.run(|| {
        let table = match kind {
            "parallel" => estimate_model1(&load_parallel_corpus(&inputs[0])?, iterations)?,
            "dictionary" => table_from_dictionary(&load_dictionary(&inputs[0])?),
            _ => {
                let conv = table_from_embeddings(
                    &WordEmbeddingSet::load(&inputs[0])?,
                    &WordEmbeddingSet::load(&inputs[1])?,
                    k,
                    ExecMode::default(),
                )?;
                if conv.skipped > 0 {
                    log::warn!("{} words without a usable vector were skipped", conv.skipped);
                }
                conv.table
            }
        };
        table.validate()?;
        log::info!("{} source words", table.len());
        Ok(table.save(&out)?)
    })?;
    Ok(())
}

pub fn index(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = cfg.input("corpus")?;
    let out = cfg.output("index.json");
    let stage = Stage::new("index", &KvMap::new(), &[&corpus], vec![out.clone()])?;
    stage.run(|| {
        let index = build_index(&tokenized(&corpus)?)?;
        log::info!("{} documents, average length {:.1}", index.num_docs(), index.avgdl());
        Ok(index.save(&out)?)
    })?;
    Ok(())
}

pub fn retrieve(cfg: &ExperimentConfig) -> Result<()> {
    let index_path = cfg.input("index")?;
    let queries = cfg.input("queries")?;
    let table_path = cfg.optional_input("table")?;
    let out = cfg.output("first_stage.trec");
    let mut inputs = vec![index_path.as_path(), queries.as_path()];
    if let Some(t) = &table_path {
        inputs.push(t);
    }
    let stage = Stage::new("retrieve", &cfg.kv.subset(&["depth"]), &inputs, vec![out.clone()])?;
    let depth: usize = cfg.get("depth", 500)?;
    stage.run(|| {
        let index = InvertedIndex::load(&index_path)?;
        let qs: BTreeMap<String, Vec<String>> = tokenized(&queries)?.into_iter().collect();
        let run = match &table_path {
            Some(t) => first_stage_run(&index, &qs, &load_lexical_table(t)?, depth)?,
            None => {
                // monolingual: every word translates to itself
                let mut identity = TranslationTable::default();
                for w in qs.values().flatten() {
                    identity.add(w, w, 1.0);
                }
                first_stage_run(&index, &qs, &identity, depth)?
            }
        };
        Ok(run.save(&out, "bm25")?)
    })?;
    Ok(())
}

struct Inputs {
    paths: Vec<PathBuf>,
}

impl Inputs {
    fn gather(cfg: &ExperimentConfig) -> Result<Self> {
        let paths = ["corpus", "queries", "qrels", "table", "vocab", "run"]
            .iter()
            .map(|k| cfg.input(k))
            .collect::<Result<_>>()?;
        Ok(Inputs { paths })
    }

    fn refs(&self) -> Vec<&Path> {
        self.paths.iter().map(PathBuf::as_path).collect()
    }

    fn workbench(&self, seed: u64) -> Result<Workbench> {
        let p = &self.paths;
        Ok(Workbench::assemble(
            tokenized(&p[1])?.into_iter().collect(),
            tokenized(&p[0])?.into_iter().collect::<HashMap<_, _>>(),
            Vocab::load(&p[4])?,
            load_lexical_table(&p[3])?,
            Qrels::load(&p[2])?,
            RankedRun::load(&p[5])?,
            seed,
        )?)
    }
}

enum Precision {
    Single,
    Double,
}

fn precision(cfg: &ExperimentConfig) -> Result<Precision> {
    match cfg.kv.get("precision").unwrap_or("f32") {
        "f32" => Ok(Precision::Single),
        "f64" => Ok(Precision::Double),
        other => bail!(UsageError(format!("precision must be f32 or f64, got {other:?}"))),
    }
}

fn train_one<T: Scalar>(
    cfg: &ExperimentConfig,
    bench: &Workbench,
    mat_layers: Option<&BTreeSet<usize>>,
    fold: usize,
    dump_mtr: bool,
) -> Result<RunReport<T>> {
    let mut mcfg = cfg.model(bench.vocab.len())?;
    if let Some(l) = mat_layers {
        mcfg.mat_layers = l.clone();
    }
    let tcfg = cfg.train()?;
    let report = run_fold::<T>(bench, &mcfg, &tcfg, cfg.mode, fold, ExecMode::default())?;
    let dir = cfg.output(&report.tag());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    report.outcome.model.save(&dir.join("model.ckpt"))?;
    write(&dir.join("train_log.csv"), &epoch_log_csv(&report.outcome.log))?;
    report.test_run.save(&dir.join("test.trec"), &report.tag())?;
    let mut metrics = KvMap::new();
    metrics.set("map", format!("{:.6}", report.map()));
    metrics.set("p10", format!("{:.6}", report.p10()));
    metrics.set("best_epoch", report.outcome.best_epoch);
    metrics.set("best_val_map", format!("{:.6}", report.outcome.best_val_map));
    metrics.set("optimizer_steps", report.outcome.optimizer_steps);
    write(&dir.join("metrics.txt"), &metrics.to_text())?;
    let mut effective = mcfg.to_kv().to_text();
    effective.push_str(&tcfg.to_kv().to_text());
    effective.push_str(&format!("mode = {}\nfold = {fold}\n", cfg.mode));
    write(&dir.join("config.txt"), &effective)?;
    if dump_mtr {
        dump_first_matrix(bench, &report, mcfg.max_len, tcfg.doc_cap, &dir.join("mtr_debug.tsv"))?;
    }
    println!("{}\tMAP {:.4}\tP@10 {:.4}", report.tag(), report.map(), report.p10());
    Ok(report)
}

/// Writes the matrix the model received for the first training query and
/// its top first-stage document.
fn dump_first_matrix<T: Scalar>(
    bench: &Workbench,
    report: &RunReport<T>,
    max_len: usize,
    doc_cap: usize,
    path: &Path,
) -> Result<()> {
    let fold = &bench.folds.folds[report.fold];
    let Some((qid, did)) = fold
        .train
        .iter()
        .find_map(|q| bench.first_stage.get(q).and_then(|r| r.first()).map(|(d, _)| (q, d)))
    else {
        bail!("no first-stage document to dump a matrix for");
    };
    let data = bench.rerank_data(report.mode.matrix(), max_len, doc_cap);
    let (segments, mtrs) = data.inputs(qid, did)?;
    write(path, &mtrs[0].to_tsv(&segments[0], &bench.vocab))
}

pub fn train(cfg: &ExperimentConfig, dump_mtr: bool) -> Result<()> {
    let inputs = Inputs::gather(cfg)?;
    let bench = inputs.workbench(cfg.seed)?;
    let precision = precision(cfg)?;
    for fold in cfg.folds()? {
        let mcfg = cfg.model(bench.vocab.len())?;
        let tag = mart_core::experiment::run_tag(cfg.mode, &mcfg.mat_layers, fold);
        let dir = cfg.output(&tag);
        let outputs = vec![dir.join("model.ckpt"), dir.join("test.trec"), dir.join("metrics.txt")];
        let mut settings = cfg.kv.clone();
        settings.set("fold", fold);
        settings.set("dump_mtr", dump_mtr);
        let stage = Stage::new("train", &settings, &inputs.refs(), outputs)?;
        stage.run(|| {
            match precision {
                Precision::Single => train_one::<f32>(cfg, &bench, None, fold, dump_mtr).map(drop),
                Precision::Double => train_one::<f64>(cfg, &bench, None, fold, dump_mtr).map(drop),
            }
        })?;
    }
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<()> {
    let inputs = Inputs::gather(cfg)?;
    let bench = inputs.workbench(cfg.seed)?;
    let layers = cfg.model(bench.vocab.len())?.layers;
    let settings = cfg.ablation_settings(layers)?;
    let folds = cfg.folds()?;
    let out = cfg.output("ablation.tsv");
    let stage = Stage::new("ablate", &cfg.kv, &inputs.refs(), vec![out.clone()])?;
    let precision = precision(cfg)?;
    stage.run(|| {
        let mut rows = Vec::new();
        for set in &settings {
            log::info!("MAT layers {set:?}");
            let row = match precision {
                Precision::Single => {
                    let reports = folds
                        .iter()
                        .map(|&f| train_one::<f32>(cfg, &bench, Some(set), f, false))
                        .collect::<Result<Vec<_>>>()?;
                    ablation_row(set.clone(), &reports)
                }
                Precision::Double => {
                    let reports = folds
                        .iter()
                        .map(|&f| train_one::<f64>(cfg, &bench, Some(set), f, false))
                        .collect::<Result<Vec<_>>>()?;
                    ablation_row(set.clone(), &reports)
                }
            };
            rows.push(row);
        }
        let table = ablation_table(&rows);
        print!("{table}");
        write(&out, &table)
    })?;
    Ok(())
}

/// Parses `name=path` run arguments.
fn named_runs(cfg: &ExperimentConfig, flags: &[String]) -> Result<Vec<(String, PathBuf)>> {
    let mut specs: Vec<String> = flags.to_vec();
    if let Some(v) = cfg.kv.get("runs") {
        specs.extend(v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()));
    }
    if specs.is_empty() {
        bail!(UsageError("eval needs at least one --run name=path".into()));
    }
    specs
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .ok_or_else(|| UsageError(format!("run {s:?} is not name=path")))?;
            let path = PathBuf::from(path);
            if !path.exists() {
                bail!(UsageError(format!("run file {} does not exist", path.display())));
            }
            Ok((name.to_owned(), path))
        })
        .collect()
}

pub fn eval(cfg: &ExperimentConfig, run_flags: &[String]) -> Result<()> {
    let qrels = Qrels::load(&cfg.input("qrels")?)?;
    let runs = named_runs(cfg, run_flags)?;
    let mut per_run = Vec::new();
    let mut out = String::from("run\tMAP@100\tP@10\tqueries\n");
    for (name, path) in &runs {
        let run = RankedRun::load(path)?;
        let ap = per_query_ap(&run, &qrels, EVAL_CUTOFF)?;
        let p10 = per_query_p_at(&run, &qrels, 10)?;
        let mean = |m: &BTreeMap<String, f64>| m.values().sum::<f64>() / m.len() as f64;
        writeln!(out, "{name}\t{:.4}\t{:.4}\t{}", mean(&ap), mean(&p10), ap.len())?;
        per_run.push((name.clone(), ap, p10));
    }
    if per_run.len() > 1 {
        out.push_str("\nrun_a\trun_b\tmetric\tt\tp\tsignificant\n");
        for i in 0..per_run.len() {
            for j in i + 1..per_run.len() {
                let (a, b) = (&per_run[i], &per_run[j]);
                for (metric, ma, mb) in [("MAP@100", &a.1, &b.1), ("P@10", &a.2, &b.2)] {
                    let shared: Vec<&String> = ma.keys().filter(|q| mb.contains_key(*q)).collect();
                    let xs: Vec<f64> = shared.iter().map(|q| ma[*q]).collect();
                    let ys: Vec<f64> = shared.iter().map(|q| mb[*q]).collect();
                    match paired_t_test(&xs, &ys) {
                        Ok(t) => writeln!(
                            out,
                            "{}\t{}\t{metric}\t{:.4}\t{:.4}\t{}",
                            a.0,
                            b.0,
                            t.t,
                            t.p,
                            if t.significant(SIGNIFICANCE) { "yes" } else { "no" }
                        )?,
                        Err(e) => writeln!(out, "{}\t{}\t{metric}\tNA\tNA\t{e}", a.0, b.0)?,
                    }
                }
            }
        }
    }
    print!("{out}");
    if cfg.kv.contains("out") {
        write(&cfg.output("eval.tsv"), &out)?;
    }
    Ok(())
}

fn analyze_with<T: Scalar>(cfg: &ExperimentConfig, inputs: &Inputs, model_path: &Path, out: &Path) -> Result<()> {
    let bench = inputs.workbench(cfg.seed)?;
    let model = MartModel::<T>::load(model_path)?;
    let per_query: usize = cfg.get("analyze_docs", 20)?;
    let max_len = model.config().max_len;
    let doc_cap: usize = cfg.train()?.doc_cap;
    let mut pairs = Vec::new();
    for (qid, ranking) in bench.first_stage.iter() {
        let Some(q) = bench.queries.get(qid) else { continue };
        for (did, _) in ranking.iter().take(per_query) {
            let Some(d) = bench.docs.get(did) else { continue };
            for seg in prepare_doc_input(q, d, &bench.vocab, max_len, doc_cap)? {
                let mtr = build_mtr(&seg, &bench.table);
                pairs.push((seg, mtr));
            }
        }
    }
    let report = layer_similarity_report(&model, &pairs, &bench.table, cfg.seed, ExecMode::default())?;
    print!("{}", report.to_tsv());
    write(out, &report.to_tsv())
}

pub fn analyze(cfg: &ExperimentConfig) -> Result<()> {
    let inputs = Inputs::gather(cfg)?;
    let model_path = cfg.input("model")?;
    let out = cfg.output("layersim.tsv");
    let mut refs = inputs.refs();
    refs.push(&model_path);
    let stage = Stage::new("analyze", &cfg.kv, &refs, vec![out.clone()])?;
    stage.run(|| match precision(cfg)? {
        Precision::Single => analyze_with::<f32>(cfg, &inputs, &model_path, &out),
        Precision::Double => analyze_with::<f64>(cfg, &inputs, &model_path, &out),
    })?;
    Ok(())
}
