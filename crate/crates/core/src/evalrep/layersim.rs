//! Per-layer cosine similarity of query/document word representations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attnmat::TranslationAttentionMatrix;
use crate::error::Result;
use crate::model::MartModel;
use crate::par::{try_map_indexed, ExecMode};
use crate::tensor::{Scalar, Tensor};
use crate::textprep::TokenizedSequence;
use crate::xresource::TranslationTable;

/// Random non-translated pairs drawn per input.
pub const RANDOM_PAIRS_PER_INPUT: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSim {
    pub layer: usize,
    /// `None` when the category had no pairs.
    pub translated: Option<f64>,
    pub random: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSimReport {
    pub rows: Vec<LayerSim>,
    pub translated_pairs: usize,
    pub random_pairs: usize,
}

impl LayerSimReport {
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("layer\ttranslated_sim\trandom_sim\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\n", r.layer, fmt(r.translated), fmt(r.random)));
        }
        out
    }
}

/// Mean of the piece vectors of one word.
fn word_vector<T: Scalar>(h: &Tensor<T>, span: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; h.cols()];
    for &t in span {
        for (acc, x) in v.iter_mut().zip(h.row(t)) {
            *acc += x.as_f64();
        }
    }
    v.iter_mut().for_each(|x| *x /= span.len() as f64);
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

struct Partial {
    translated: Vec<f64>,
    random: Vec<f64>,
    n_translated: usize,
    n_random: usize,
}

/// For each input, every cross-segment word pair with a nonzero table
/// probability counts as translated, and up to ten other cross-segment
/// pairs are sampled as random. Similarities are averaged over all pairs
/// of a category, per layer (`0` is the embedding output).
pub fn layer_similarity_report<T: Scalar>(
    model: &MartModel<T>,
    inputs: &[(TokenizedSequence, TranslationAttentionMatrix)],
    table: &TranslationTable,
    seed: u64,
    mode: ExecMode,
) -> Result<LayerSimReport> {
    let n_states = model.config().layers + 1;
    let partials = try_map_indexed(mode, inputs, |i, (seq, mtr)| -> Result<Partial> {
        let states = model.hidden_states(seq, Some(mtr))?;
        let spans = seq.word_spans();
        let mut translated = Vec::new();
        let mut others = Vec::new();
        for q in 0..seq.m_q {
            for d in seq.m_q..seq.words.len() {
                if spans[q].is_empty() || spans[d].is_empty() {
                    continue;
                }
                if table.prob(&seq.words[q], &seq.words[d]) > 0.0 {
                    translated.push((q, d));
                } else {
                    others.push((q, d));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let random: Vec<(usize, usize)> = others
            .choose_multiple(&mut rng, RANDOM_PAIRS_PER_INPUT)
            .copied()
            .collect();
        let sum_over = |pairs: &[(usize, usize)]| -> Vec<f64> {
            states
                .iter()
                .map(|h| {
                    pairs
                        .iter()
                        .map(|&(q, d)| cosine(&word_vector(h, &spans[q]), &word_vector(h, &spans[d])))
                        .sum()
                })
                .collect()
        };
        Ok(Partial {
            translated: sum_over(&translated),
            random: sum_over(&random),
            n_translated: translated.len(),
            n_random: random.len(),
        })
    })?;
    let mut t_sum = vec![0.0; n_states];
    let mut r_sum = vec![0.0; n_states];
    let (mut nt, mut nr) = (0, 0);
    for p in &partials {
        for l in 0..n_states {
            t_sum[l] += p.translated[l];
            r_sum[l] += p.random[l];
        }
        nt += p.n_translated;
        nr += p.n_random;
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(LayerSimReport {
        rows: (0..n_states)
            .map(|l| LayerSim {
                layer: l,
                translated: avg(t_sum[l], nt),
                random: avg(r_sum[l], nr),
            })
            .collect(),
        translated_pairs: nt,
        random_pairs: nr,
    })
}
