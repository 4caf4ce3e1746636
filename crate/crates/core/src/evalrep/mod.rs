//! Ranked runs, relevance judgments, ranking metrics, significance tests,
//! the layer-wise similarity report and the synthetic benchmark.

mod layersim;
mod stats;
mod synth;

pub use layersim::{layer_similarity_report, LayerSim, LayerSimReport};
pub use stats::{ln_gamma, paired_t_test, student_t_two_tailed, TTest};
pub use synth::{gen_synthetic_clir, overlap_needed, SynthConfig, SyntheticClir};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Binary relevance judgments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judged: BTreeMap<String, BTreeMap<String, u8>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, qid: &str, doc: &str, grade: u8) -> Result<()> {
        if grade > 1 {
            return Err(Error::InvalidInput(format!("grade {grade} for ({qid}, {doc}) is not binary")));
        }
        self.judged.entry(qid.to_owned()).or_default().insert(doc.to_owned(), grade);
        Ok(())
    }

    pub fn is_relevant(&self, qid: &str, doc: &str) -> bool {
        self.judged.get(qid).and_then(|m| m.get(doc)) == Some(&1)
    }

    pub fn relevant(&self, qid: &str) -> BTreeSet<&str> {
        self.judged
            .get(qid)
            .map(|m| m.iter().filter(|(_, &g)| g == 1).map(|(d, _)| d.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn num_relevant(&self, qid: &str) -> usize {
        self.judged.get(qid).map_or(0, |m| m.values().filter(|&&g| g == 1).count())
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judged.keys().map(String::as_str)
    }

    /// TREC `qid 0 docid grade` lines.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut q = Qrels::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(origin, i + 1, m);
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let grade: u8 = fields[3]
                .parse()
                .map_err(|_| err(format!("bad grade {:?}", fields[3])))?;
            q.set(fields[0], fields[2], grade).map_err(|e| err(e.to_string()))?;
        }
        Ok(q)
    }

    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (qid, docs) in &self.judged {
            for (doc, g) in docs {
                out.push_str(&format!("{qid} 0 {doc} {g}\n"));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_trec()).map_err(|e| Error::io(path, e))
    }
}

/// Per-query rankings ordered by score descending, ties by doc id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedRun {
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RankedRun {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a ranking for `qid` after sorting it. Duplicate documents and
    /// non-finite scores are rejected.
    pub fn insert(&mut self, qid: &str, mut ranking: Vec<(String, f64)>) -> Result<()> {
        let mut seen = HashSet::new();
        for (d, s) in &ranking {
            if !s.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite score for ({qid}, {d})")));
            }
            if !seen.insert(d.as_str()) {
                return Err(Error::InvalidInput(format!("document {d} ranked twice for {qid}")));
            }
        }
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        self.rankings.insert(qid.to_owned(), ranking);
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(qid).map(Vec::as_slice)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.rankings.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// Keeps only the listed queries.
    pub fn restrict(&self, qids: &[String]) -> RankedRun {
        let keep: HashSet<&str> = qids.iter().map(String::as_str).collect();
        RankedRun {
            rankings: self
                .rankings
                .iter()
                .filter(|(q, _)| keep.contains(q.as_str()))
                .map(|(q, r)| (q.clone(), r.clone()))
                .collect(),
        }
    }

    /// TREC `qid Q0 docid rank score tag` lines, ranks starting at 1.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (qid, ranking) in &self.rankings {
            for (i, (doc, score)) in ranking.iter().enumerate() {
                out.push_str(&format!("{qid} Q0 {doc} {} {score:.6} {tag}\n", i + 1));
            }
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 6 {
                return Err(Error::parse(origin, i + 1, format!("expected 6 fields, found {}", fields.len())));
            }
            let score: f64 = fields[4]
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("bad score {:?}", fields[4])))?;
            grouped
                .entry(fields[0].to_owned())
                .or_default()
                .push((fields[2].to_owned(), score));
        }
        let mut run = RankedRun::new();
        for (q, r) in grouped {
            run.insert(&q, r).map_err(|e| Error::parse(origin, 0, e.to_string()))?;
        }
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path, tag: &str) -> Result<()> {
        std::fs::write(path, self.to_trec(tag)).map_err(|e| Error::io(path, e))
    }
}

/// Average precision of one ranking truncated at `cutoff`.
pub fn average_precision(ranking: &[(String, f64)], relevant: &BTreeSet<&str>, cutoff: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, (doc, _)) in ranking.iter().take(cutoff).enumerate() {
        if relevant.contains(doc.as_str()) {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

pub fn precision_at(ranking: &[(String, f64)], relevant: &BTreeSet<&str>, k: usize) -> f64 {
    let hits = ranking.iter().take(k).filter(|(d, _)| relevant.contains(d.as_str())).count();
    hits as f64 / k as f64
}

/// Metric per query, over the run queries that have at least one relevant document.
fn per_query(
    run: &RankedRun,
    qrels: &Qrels,
    f: impl Fn(&[(String, f64)], &BTreeSet<&str>) -> f64,
) -> Result<BTreeMap<String, f64>> {
    if run.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty run".into()));
    }
    let scores: BTreeMap<String, f64> = run
        .iter()
        .filter_map(|(q, r)| {
            let rel = qrels.relevant(q);
            (!rel.is_empty()).then(|| (q.to_owned(), f(r, &rel)))
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::InvalidInput("no run query has a relevant document".into()));
    }
    Ok(scores)
}

pub fn per_query_ap(run: &RankedRun, qrels: &Qrels, cutoff: usize) -> Result<BTreeMap<String, f64>> {
    per_query(run, qrels, |r, rel| average_precision(r, rel, cutoff))
}

pub fn per_query_p_at(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<BTreeMap<String, f64>> {
    per_query(run, qrels, |r, rel| precision_at(r, rel, k))
}

fn mean(values: &BTreeMap<String, f64>) -> f64 {
    values.values().sum::<f64>() / values.len() as f64
}

pub fn map_at(run: &RankedRun, qrels: &Qrels, cutoff: usize) -> Result<f64> {
    per_query_ap(run, qrels, cutoff).map(|m| mean(&m))
}

pub fn p_at(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<f64> {
    per_query_p_at(run, qrels, k).map(|m| mean(&m))
}
