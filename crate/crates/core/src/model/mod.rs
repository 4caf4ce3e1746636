//! The cross-encoder reranker: embeddings, a stack of vanilla and MAT
//! layers, and a linear head on the final `[CLS]` state.

mod config;
pub mod layers;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::{mat_extra_params, LayerKind, ModelConfig};
pub use layers::{
    feed_forward, mat_layer, multi_head_attention, translation_head, vanilla_layer, AttentionVars, Dropout, FfnVars,
    LayerVars, NormVars, TranslationHeadVars,
};

use crate::attnmat::TranslationAttentionMatrix;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Graph, Scalar, Tensor, Var};
use crate::textprep::TokenizedSequence;

/// Seed for one named parameter, so a tensor's initial value does not
/// depend on which other tensors exist.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_tensor<T: Scalar>(name: &str, shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    if name.ends_with(".gamma") {
        return Tensor::filled(shape, T::one());
    }
    if shape.len() == 1 {
        // biases and layer-norm betas
        return Tensor::zeros(shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape from config")
}

/// Model parameters in a fixed order plus the configuration they follow.
#[derive(Clone, Debug, PartialEq)]
pub struct MartModel<T: Scalar> {
    config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a model, in parameter order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub params: Vec<Var>,
    pub token: Var,
    pub position: Var,
    pub segment: Var,
    pub ln_embed: NormVars,
    pub layers: Vec<LayerVars>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl<T: Scalar> MartModel<T> {
    /// Builds a model whose layers follow `config.mat_layers`, with
    /// freshly initialised parameters.
    pub fn assemble(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, config.init_std, seed);
                (name, t)
            })
            .collect();
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Self {
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        MartModel { config, params, index }
    }

    /// Copies every tensor shared with an all-vanilla `base` model. The
    /// translation-head tensors keep their fresh initialisation.
    pub fn init_from_base(&mut self, base: &MartModel<T>) -> Result<()> {
        if base.config != self.config.base() {
            return Err(Error::Config(
                "base model must have the same architecture with no MAT layers".into(),
            ));
        }
        for (name, tensor) in &base.params {
            let i = self.index[name];
            self.params[i].1 = tensor.clone();
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    /// Mutable access in parameter order, for optimizers.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.config.layer_kinds()
    }

    pub fn has_mat_layers(&self) -> bool {
        !self.config.mat_layers.is_empty()
    }

    /// Puts every parameter on `g` as a borrowed leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, trainable: bool) -> BoundModel {
        let params: Vec<Var> = self.params.iter().map(|(_, t)| g.leaf_ref(t, trainable)).collect();
        let v = |name: &str| params[self.index[name]];
        let norm = |prefix: &str| NormVars {
            gamma: v(&format!("{prefix}.gamma")),
            beta: v(&format!("{prefix}.beta")),
        };
        let layers = self
            .config
            .layer_kinds()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let p = format!("layer.{}", i + 1);
                let heads = |proj: &str| {
                    (0..self.config.heads)
                        .map(|h| v(&format!("{p}.attn.{proj}.{h}")))
                        .collect::<Vec<_>>()
                };
                LayerVars {
                    attn: AttentionVars {
                        query: heads("query"),
                        key: heads("key"),
                        value: heads("value"),
                        out: v(&format!("{p}.attn.out")),
                    },
                    ln_attn: norm(&format!("{p}.ln_attn")),
                    th: (kind == LayerKind::Mat).then(|| TranslationHeadVars {
                        value: v(&format!("{p}.th.value")),
                        out: v(&format!("{p}.th.out")),
                        norm: norm(&format!("{p}.ln_th")),
                    }),
                    ffn: FfnVars {
                        w1: v(&format!("{p}.ffn.w1")),
                        b1: v(&format!("{p}.ffn.b1")),
                        w2: v(&format!("{p}.ffn.w2")),
                        b2: v(&format!("{p}.ffn.b2")),
                    },
                    ln_out: norm(&format!("{p}.ln_out")),
                }
            })
            .collect();
        BoundModel {
            token: v("embeddings.token"),
            position: v("embeddings.position"),
            segment: v("embeddings.segment"),
            ln_embed: norm("embeddings.ln"),
            layers,
            head_weight: v("head.weight"),
            head_bias: v("head.bias"),
            params,
        }
    }

    fn eps(&self) -> T {
        T::of(self.config.ln_eps)
    }

    /// Token + position + segment embeddings, layer-normed.
    pub fn embed_on<'a>(
        &self,
        g: &mut Graph<'a, T>,
        b: &BoundModel,
        seq: &TokenizedSequence,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let m = seq.len();
        if m > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: m,
                max: self.config.max_len,
            });
        }
        let ids: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..m).collect();
        let segments: Vec<usize> = seq.segment.iter().map(|&s| s as usize).collect();
        let tok = g.gather(b.token, &ids)?;
        let pos = g.gather(b.position, &positions)?;
        let seg = g.gather(b.segment, &segments)?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, seg)?;
        let h = g.layer_norm(sum, b.ln_embed.gamma, b.ln_embed.beta, self.eps())?;
        match dropout {
            Some(d) => d.apply(g, h),
            None => Ok(h),
        }
    }

    /// Runs the full stack and returns the `L + 1` hidden states, the
    /// embedding output first. `mtr` is required when the model has MAT layers.
    pub fn forward_on<'a>(
        &self,
        g: &mut Graph<'a, T>,
        b: &BoundModel,
        seq: &TokenizedSequence,
        mtr: Option<&TranslationAttentionMatrix>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Vec<Var>> {
        let mut h = self.embed_on(g, b, seq, dropout.as_deref_mut())?;
        let mtr_var = match (self.has_mat_layers(), mtr) {
            (false, _) => None,
            (true, None) => {
                return Err(Error::InvalidInput(
                    "a translation attention matrix is required by MAT layers".into(),
                ))
            }
            (true, Some(m)) => {
                if m.m() != seq.len() {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        left: vec![seq.len()],
                        right: vec![m.m(), m.m()],
                    });
                }
                Some(g.leaf(m.to_tensor(), false))
            }
        };
        let mut states = vec![h];
        for layer in &b.layers {
            h = match (&layer.th, mtr_var) {
                (Some(_), Some(mv)) => mat_layer(g, h, mv, layer, self.eps(), dropout.as_deref_mut())?,
                _ => vanilla_layer(g, h, layer, self.eps(), dropout.as_deref_mut())?,
            };
            states.push(h);
        }
        Ok(states)
    }

    /// Last-Int score: the final-layer `[CLS]` vectors of the segments are
    /// averaged and fed to the linear head. Returns a `1 × 1` node.
    pub fn score_on<'a>(
        &self,
        g: &mut Graph<'a, T>,
        b: &BoundModel,
        segments: &[TokenizedSequence],
        mtrs: &[TranslationAttentionMatrix],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if segments.is_empty() || segments.len() > 2 || mtrs.len() != segments.len() {
            return Err(Error::InvalidInput(format!(
                "expected 1 or 2 segments with one matrix each, got {} segments and {} matrices",
                segments.len(),
                mtrs.len()
            )));
        }
        let mut cls = Vec::with_capacity(segments.len());
        for (seq, mtr) in segments.iter().zip(mtrs) {
            let states = self.forward_on(g, b, seq, Some(mtr), dropout.as_deref_mut())?;
            let last = *states.last().expect("at least one layer");
            cls.push(g.row(last, 0)?);
        }
        let pooled = if cls.len() == 1 { cls[0] } else { g.mean(&cls)? };
        let s = g.matmul(pooled, b.head_weight)?;
        g.add_bias(s, b.head_bias)
    }

    /// Evaluation-mode relevance score.
    pub fn score_last_int(&self, segments: &[TokenizedSequence], mtrs: &[TranslationAttentionMatrix]) -> Result<T> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let s = self.score_on(&mut g, &b, segments, mtrs, None)?;
        Ok(g.value(s).item())
    }

    /// Evaluation-mode hidden states of every layer (`L + 1` tensors).
    pub fn hidden_states(&self, seq: &TokenizedSequence, mtr: Option<&TranslationAttentionMatrix>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let states = self.forward_on(&mut g, &b, seq, mtr, None)?;
        Ok(states.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            metadata: self.config.to_kv().to_text(),
            tensors: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let kv = KvMap::parse(&ckpt.metadata, "checkpoint metadata")?;
        let config = ModelConfig::from_kv(&kv)?;
        let expected = config.param_shapes();
        if expected.len() != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                ckpt.tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&ckpt.tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(Self::from_parts(config, ckpt.tensors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }
}
