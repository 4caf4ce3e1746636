//! The translation attention matrix: a fixed, row-stochastic attention
//! pattern linking query tokens to document tokens that translate them.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::textprep::{TokenizedSequence, Vocab};
use crate::xresource::TranslationTable;

/// Dense `m × m` non-negative matrix whose rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationAttentionMatrix {
    m: usize,
    values: Vec<f64>,
}

impl TranslationAttentionMatrix {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.chunks(self.m).map(|r| r.iter().sum()).collect()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.m).all(|i| (0..self.m).all(|j| self.get(i, j) == if i == j { 1.0 } else { 0.0 }))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.m, self.m], self.values.iter().map(|&x| T::of(x)).collect())
            .expect("m × m values")
    }

    /// TSV dump with a header row of token labels and one labelled row per token.
    pub fn to_tsv(&self, seq: &TokenizedSequence, vocab: &Vocab) -> String {
        let labels: Vec<&str> = seq.token_ids.iter().map(|&t| vocab.piece(t)).collect();
        let mut out = String::from("token");
        for l in &labels {
            out.push('\t');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in labels.iter().enumerate() {
            out.push_str(l);
            for x in self.row(i) {
                out.push_str(&format!("\t{x:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// The matrix before row normalisation: ones on the diagonal and, for every
/// query word `i` and document word `j`, `T(w_j, w_i)` written into both
/// `(i-pieces × j-pieces)` and `(j-pieces × i-pieces)` blocks. Special
/// tokens and words without translations keep only their diagonal.
pub fn build_mtr_unnormalized(seq: &TokenizedSequence, table: &TranslationTable) -> Vec<f64> {
    let m = seq.len();
    let mut values = vec![0.0; m * m];
    for k in 0..m {
        values[k * m + k] = 1.0;
    }
    let spans = seq.word_spans();
    let (query, doc) = spans.split_at(seq.m_q);
    for (qi, q_span) in query.iter().enumerate() {
        let source = &seq.words[qi];
        if table.lookup(source).is_empty() {
            continue;
        }
        for (dj, d_span) in doc.iter().enumerate() {
            let p = table.prob(source, &seq.words[seq.m_q + dj]);
            if p == 0.0 {
                continue;
            }
            for &a in q_span {
                for &b in d_span {
                    values[a * m + b] = p;
                    values[b * m + a] = p;
                }
            }
        }
    }
    values
}

fn row_normalize(m: usize, mut values: Vec<f64>) -> TranslationAttentionMatrix {
    for row in values.chunks_mut(m) {
        let total: f64 = row.iter().sum();
        for x in row {
            *x /= total;
        }
    }
    TranslationAttentionMatrix { m, values }
}

/// Builds the translation attention matrix for a query–document pair.
/// The query side is looked up as the table's source language.
pub fn build_mtr(seq: &TokenizedSequence, table: &TranslationTable) -> TranslationAttentionMatrix {
    row_normalize(seq.len(), build_mtr_unnormalized(seq, table))
}

/// The placebo: an `m × m` identity.
pub fn build_placebo(m: usize) -> Result<TranslationAttentionMatrix> {
    if m == 0 {
        return Err(Error::InvalidInput("placebo matrix needs m ≥ 1".into()));
    }
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        values[i * m + i] = 1.0;
    }
    Ok(TranslationAttentionMatrix { m, values })
}
