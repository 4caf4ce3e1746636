//! Effective experiment configuration: a key-value file, then `--set`
//! assignments, then dedicated flags.
//!
//! Top-level keys name inputs, outputs and run choices. Architecture keys
//! live under `model.`, fine-tuning keys under `train.` and generator keys
//! under `synth.`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mart_core::evalrep::SynthConfig;
use mart_core::experiment::RerankMode;
use mart_core::kv::KvMap;
use mart_core::model::ModelConfig;
use mart_core::textprep::Stoplist;
use mart_core::trainer::TrainConfig;

use crate::UsageError;

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kv: KvMap,
    pub out: PathBuf,
    pub mode: RerankMode,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut kv = match file {
            Some(p) => KvMap::load(p).map_err(|e| UsageError(e.to_string()))?,
            None => KvMap::new(),
        };
        for s in sets {
            kv.apply_assignment(s).map_err(|e| UsageError(format!("--set {s}: {e}")))?;
        }
        let mode = kv
            .get("mode")
            .unwrap_or("mart")
            .parse::<RerankMode>()
            .map_err(|e| UsageError(e.to_string()))?;
        let seed = kv.parsed_or("seed", 0u64).map_err(|e| UsageError(e.to_string()))?;
        let out = PathBuf::from(kv.get("out").unwrap_or("."));
        Ok(ExperimentConfig { kv, out, mode, seed })
    }

    /// Path-valued key that must name an existing file.
    pub fn input(&self, key: &str) -> Result<PathBuf> {
        let Some(v) = self.kv.get(key) else {
            bail!(UsageError(format!("missing required key {key}")));
        };
        let p = PathBuf::from(v);
        if !p.exists() {
            bail!(UsageError(format!("{key} = {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn optional_input(&self, key: &str) -> Result<Option<PathBuf>> {
        if self.kv.contains(key) {
            self.input(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn get<V: std::str::FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.kv.parsed_or(key, default).map_err(|e| UsageError(e.to_string()))?)
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn stoplist(&self) -> Result<Stoplist> {
        match self.kv.get("stoplist") {
            None | Some("") | Some("none") => Ok(Stoplist::default()),
            Some(v) => {
                if let Some(s) = Stoplist::builtin(v) {
                    return Ok(s);
                }
                let p = self.input("stoplist")?;
                Stoplist::load(&p).with_context(|| format!("reading stoplist {}", p.display()))
            }
        }
    }

    /// Architecture block. `mat_layers` at top level overrides the block, and
    /// vanilla mode clears it.
    pub fn model(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut section = self.kv.section("model");
        section.set("vocab_size", vocab_size);
        if let Some(v) = self.kv.get("mat_layers") {
            section.set("mat_layers", v);
        }
        let cfg = ModelConfig::from_kv(&section).map_err(|e| UsageError(e.to_string()))?;
        Ok(self.mode.model_config(&cfg))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let mut section = self.kv.section("train");
        if !section.contains("seed") {
            section.set("seed", self.seed);
        }
        Ok(TrainConfig::from_kv(&section).map_err(|e| UsageError(e.to_string()))?)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let s = self.kv.section("synth");
        let d = SynthConfig::default();
        let pair = |key: &str, default: (usize, usize)| -> Result<(usize, usize)> {
            match s.list::<usize>(key).map_err(|e| UsageError(e.to_string()))? {
                None => Ok(default),
                Some(v) if v.len() == 2 => Ok((v[0], v[1])),
                Some(_) => bail!(UsageError(format!("synth.{key} needs two values: min, max"))),
            }
        };
        let get = |key: &str, default: usize| -> Result<usize> {
            Ok(s.parsed_or(key, default).map_err(|e| UsageError(e.to_string()))?)
        };
        Ok(SynthConfig {
            vocab_size: get("vocab_size", d.vocab_size)?,
            n_docs: get("n_docs", d.n_docs)?,
            n_queries: get("n_queries", d.n_queries)?,
            noise: s.parsed_or("noise", d.noise).map_err(|e| UsageError(e.to_string()))?,
            seed: self.seed,
            doc_len: pair("doc_len", d.doc_len)?,
            query_len: pair("query_len", d.query_len)?,
            planted_docs: get("planted_docs", d.planted_docs)?,
            parallel_sentences: get("parallel_sentences", d.parallel_sentences)?,
        })
    }

    /// `ablate_layers = 3; 2,3; 1,2,3`. Defaults to the last one, two and
    /// three layers below the output layer.
    pub fn ablation_settings(&self, layers: usize) -> Result<Vec<BTreeSet<usize>>> {
        match self.kv.get("ablate_layers") {
            Some(v) => v
                .split(';')
                .map(|set| {
                    set.split(',')
                        .map(|x| x.trim().parse::<usize>())
                        .collect::<std::result::Result<BTreeSet<_>, _>>()
                        .map_err(|_| UsageError(format!("bad ablate_layers entry {set:?}")).into())
                })
                .collect(),
            None => {
                if layers < 4 {
                    bail!(UsageError("default ablation settings need at least 4 layers".into()));
                }
                Ok((1..=3).map(|n| (layers - n..layers).collect()).collect())
            }
        }
    }

    pub fn folds(&self) -> Result<Vec<usize>> {
        let fold: usize = self.get("fold", 0)?;
        let v = self
            .kv
            .list::<usize>("folds")
            .map_err(|e| UsageError(e.to_string()))?
            .unwrap_or_else(|| vec![fold]);
        if v.is_empty() {
            bail!(UsageError("folds must not be empty".into()));
        }
        Ok(v)
    }
}
