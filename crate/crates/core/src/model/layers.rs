//! Transformer building blocks expressed on a [`Graph`].
//!
//! Hidden states are `m × d` with one row per token; weights are stored
//! input-major, so a projection is `h · W`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub out: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TranslationHeadVars {
    pub value: Var,
    pub out: Var,
    pub norm: NormVars,
}

/// One encoder layer. `th` is present exactly for MAT layers.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn: AttentionVars,
    pub ln_attn: NormVars,
    pub th: Option<TranslationHeadVars>,
    pub ffn: FfnVars,
    pub ln_out: NormVars,
}

/// Inverted dropout for training mode.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        g.mask(x, mask)
    }
}

fn maybe_drop<T: Scalar>(g: &mut Graph<'_, T>, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// `concat_i(softmax(h Wq_i (h Wk_i)ᵀ / sqrt(d/n)) · h Wv_i) · Wo`.
pub fn multi_head_attention<T: Scalar>(g: &mut Graph<'_, T>, h: Var, p: &AttentionVars) -> Result<Var> {
    let heads = p.query.len();
    if heads == 0 || p.key.len() != heads || p.value.len() != heads {
        return Err(Error::Config("attention needs matching query/key/value heads".into()));
    }
    let head_dim = g.value(p.query[0]).cols();
    let temperature = T::of((head_dim as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = g.matmul(h, p.query[i])?;
        let k = g.matmul(h, p.key[i])?;
        let v = g.matmul(h, p.value[i])?;
        let logits = g.matmul_bt(q, k)?;
        let weights = g.softmax_rows(logits, temperature)?;
        outputs.push(g.matmul(weights, v)?);
    }
    let joined = if heads == 1 { outputs[0] } else { g.concat_cols(&outputs)? };
    g.matmul(joined, p.out)
}

/// `M^tr · (h Wv) · Wo`. `mtr` should be a constant leaf.
pub fn translation_head<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    mtr: Var,
    p: &TranslationHeadVars,
) -> Result<Var> {
    let (m, mtr_shape) = (g.value(h).rows(), g.value(mtr).shape().to_vec());
    if mtr_shape != [m, m] {
        return Err(Error::ShapeMismatch {
            op: "translation_head",
            left: vec![m, g.value(h).cols()],
            right: mtr_shape,
        });
    }
    let v = g.matmul(h, p.value)?;
    let mixed = g.matmul(mtr, v)?;
    g.matmul(mixed, p.out)
}

/// `relu(x W1 + b1) W2 + b2`.
pub fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &FfnVars) -> Result<Var> {
    let a = g.matmul(x, p.w1)?;
    let a = g.add_bias(a, p.b1)?;
    let a = g.relu(a);
    let b = g.matmul(a, p.w2)?;
    g.add_bias(b, p.b2)
}

fn residual_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, delta: Var, n: &NormVars, eps: T) -> Result<Var> {
    let s = g.add(x, delta)?;
    g.layer_norm(s, n.gamma, n.beta, eps)
}

/// `LN(h' + FFN(h'))` with `h' = LN(h + MH(h))`.
pub fn vanilla_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    p: &LayerVars,
    eps: T,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let mh = multi_head_attention(g, h, &p.attn)?;
    let mh = maybe_drop(g, mh, &mut dropout)?;
    let mid = residual_norm(g, h, mh, &p.ln_attn, eps)?;
    let ff = feed_forward(g, mid, &p.ffn)?;
    let ff = maybe_drop(g, ff, &mut dropout)?;
    residual_norm(g, mid, ff, &p.ln_out, eps)
}

/// `LN(h' + FFN(h'))` with `h' = LN(h + MH(h)) + LN(h + TH(h))`.
pub fn mat_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    mtr: Var,
    p: &LayerVars,
    eps: T,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let th_params = p
        .th
        .as_ref()
        .ok_or_else(|| Error::Config("mat_layer called on a layer without a translation head".into()))?;
    let mh = multi_head_attention(g, h, &p.attn)?;
    let mh = maybe_drop(g, mh, &mut dropout)?;
    let mh_branch = residual_norm(g, h, mh, &p.ln_attn, eps)?;
    let th = translation_head(g, h, mtr, th_params)?;
    let th = maybe_drop(g, th, &mut dropout)?;
    let th_branch = residual_norm(g, h, th, &th_params.norm, eps)?;
    let mid = g.add(mh_branch, th_branch)?;
    let ff = feed_forward(g, mid, &p.ffn)?;
    let ff = maybe_drop(g, ff, &mut dropout)?;
    residual_norm(g, mid, ff, &p.ln_out, eps)
}
