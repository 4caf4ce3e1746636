use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Architecture hyperparameters. Layer indices in `mat_layers` are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub mat_layers: BTreeSet<usize>,
    pub ffn_hidden: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Lets a MAT layer sit at the top of the stack (ablation only).
    pub allow_mat_output_layer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 768,
            heads: 12,
            layers: 12,
            mat_layers: [10, 11].into(),
            ffn_hidden: 3072,
            max_len: 512,
            vocab_size: 30_000,
            dropout: 0.1,
            ln_eps: 1e-12,
            init_std: 0.02,
            allow_mat_output_layer: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Vanilla,
    Mat,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if let Some(&bad_idx) = self.mat_layers.iter().find(|&&l| l == 0 || l > self.layers) {
            return bad(format!("MAT layer {bad_idx} outside 1..={}", self.layers));
        }
        if !self.allow_mat_output_layer && self.mat_layers.contains(&self.layers) {
            return bad(format!(
                "layer {} is the output layer and stays vanilla (set allow_mat_output_layer to override)",
                self.layers
            ));
        }
        if self.ffn_hidden == 0 || self.max_len < 3 || self.vocab_size < 4 {
            return bad("ffn_hidden, max_len and vocab_size are too small".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return bad("ln_eps and init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (1..=self.layers)
            .map(|l| if self.mat_layers.contains(&l) { LayerKind::Mat } else { LayerKind::Vanilla })
            .collect()
    }

    /// Same architecture with every layer vanilla.
    pub fn base(&self) -> ModelConfig {
        ModelConfig {
            mat_layers: BTreeSet::new(),
            ..self.clone()
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let hd = self.head_dim();
        let mut out = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_len, d]),
            ("embeddings.segment".to_string(), vec![2, d]),
            ("embeddings.ln.gamma".to_string(), vec![d]),
            ("embeddings.ln.beta".to_string(), vec![d]),
        ];
        for (i, kind) in self.layer_kinds().into_iter().enumerate() {
            let p = format!("layer.{}", i + 1);
            for proj in ["query", "key", "value"] {
                for h in 0..self.heads {
                    out.push((format!("{p}.attn.{proj}.{h}"), vec![d, hd]));
                }
            }
            out.push((format!("{p}.attn.out"), vec![d, d]));
            out.push((format!("{p}.ln_attn.gamma"), vec![d]));
            out.push((format!("{p}.ln_attn.beta"), vec![d]));
            if kind == LayerKind::Mat {
                out.push((format!("{p}.th.value"), vec![d, d]));
                out.push((format!("{p}.th.out"), vec![d, d]));
                out.push((format!("{p}.ln_th.gamma"), vec![d]));
                out.push((format!("{p}.ln_th.beta"), vec![d]));
            }
            out.push((format!("{p}.ffn.w1"), vec![d, self.ffn_hidden]));
            out.push((format!("{p}.ffn.b1"), vec![self.ffn_hidden]));
            out.push((format!("{p}.ffn.w2"), vec![self.ffn_hidden, d]));
            out.push((format!("{p}.ffn.b2"), vec![d]));
            out.push((format!("{p}.ln_out.gamma"), vec![d]));
            out.push((format!("{p}.ln_out.beta"), vec![d]));
        }
        out.push(("head.weight".to_string(), vec![d, 1]));
        out.push(("head.bias".to_string(), vec![1]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("hidden", self.hidden);
        kv.set("heads", self.heads);
        kv.set("layers", self.layers);
        kv.set(
            "mat_layers",
            self.mat_layers.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        kv.set("ffn_hidden", self.ffn_hidden);
        kv.set("max_len", self.max_len);
        kv.set("vocab_size", self.vocab_size);
        kv.set("dropout", self.dropout);
        kv.set("ln_eps", self.ln_eps);
        kv.set("init_std", self.init_std);
        kv.set("allow_mat_output_layer", self.allow_mat_output_layer);
        kv
    }

    /// Reads the model keys from a flat config, starting from defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            hidden: kv.parsed_or("hidden", d.hidden)?,
            heads: kv.parsed_or("heads", d.heads)?,
            layers: kv.parsed_or("layers", d.layers)?,
            mat_layers: match kv.list::<usize>("mat_layers")? {
                Some(v) => v.into_iter().collect(),
                None => d.mat_layers,
            },
            ffn_hidden: kv.parsed_or("ffn_hidden", d.ffn_hidden)?,
            max_len: kv.parsed_or("max_len", d.max_len)?,
            vocab_size: kv.parsed_or("vocab_size", d.vocab_size)?,
            dropout: kv.parsed_or("dropout", d.dropout)?,
            ln_eps: kv.parsed_or("ln_eps", d.ln_eps)?,
            init_std: kv.parsed_or("init_std", d.init_std)?,
            allow_mat_output_layer: kv.parsed_or("allow_mat_output_layer", d.allow_mat_output_layer)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Extra trainable parameters a MAT layer adds over a vanilla layer:
/// `(projection weights, layer-norm weights)` = `(2·d², 2·d)`.
pub fn mat_extra_params(hidden: usize) -> (usize, usize) {
    (2 * hidden * hidden, 2 * hidden)
}
