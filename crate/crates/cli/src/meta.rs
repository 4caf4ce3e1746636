//! Content-hash sidecars that make pipeline stages resumable.
//!
//! A stage hashes its name, its settings and the bytes of its input files.
//! Every output gets `<output>.meta` recording that hash. When all outputs
//! exist and carry the current hash, the stage is skipped.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mart_core::kv::KvMap;
use sha2::{Digest, Sha256};

pub struct Stage {
    name: String,
    hash: String,
    outputs: Vec<PathBuf>,
}

fn meta_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

impl Stage {
    pub fn new(name: &str, settings: &KvMap, inputs: &[&Path], outputs: Vec<PathBuf>) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update([0]);
        h.update(settings.to_text().as_bytes());
        for p in inputs {
            h.update([0]);
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(Stage {
            name: name.to_owned(),
            hash: hex::encode(h.finalize()),
            outputs,
        })
    }

    pub fn up_to_date(&self) -> bool {
        self.outputs.iter().all(|o| {
            o.exists()
                && fs::read_to_string(meta_path(o))
                    .ok()
                    .and_then(|t| KvMap::parse(&t, "meta").ok())
                    .is_some_and(|kv| kv.get("config_hash") == Some(self.hash.as_str()))
        })
    }

    /// Writes the sidecars once every output has been produced.
    pub fn finish(&self) -> Result<()> {
        let mut kv = KvMap::new();
        kv.set("stage", &self.name);
        kv.set("config_hash", &self.hash);
        for o in &self.outputs {
            let m = meta_path(o);
            fs::write(&m, kv.to_text()).with_context(|| format!("writing {}", m.display()))?;
        }
        Ok(())
    }

    /// Runs `body` unless the outputs are current. Returns whether it ran.
    pub fn run(&self, body: impl FnOnce() -> Result<()>) -> Result<bool> {
        if self.up_to_date() {
            log::info!("{}: outputs up to date, skipping", self.name);
            return Ok(false);
        }
        for o in &self.outputs {
            if let Some(dir) = o.parent() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
        }
        body()?;
        self.finish()?;
        Ok(true)
    }
}
