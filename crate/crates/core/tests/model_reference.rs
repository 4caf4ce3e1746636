//! Layer outputs against a plain nested-Vec implementation, plus
//! finite-difference gradient checks.

use mart_core::attnmat::{build_mtr, build_placebo};
use mart_core::model::{
    mat_layer, multi_head_attention, vanilla_layer, AttentionVars, FfnVars, LayerVars, MartModel, ModelConfig,
    NormVars, TranslationHeadVars,
};
use mart_core::tensor::{Graph, Tensor, Var};
use mart_core::textprep::{encode_pair, Vocab};
use mart_core::xresource::TranslationTable;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

type M = Vec<Vec<f64>>;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> M {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn mm(a: &M, b: &M) -> M {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn softmax(a: &M, temp: f64) -> M {
    a.iter()
        .map(|row| {
            let e: Vec<f64> = row.iter().map(|x| (x / temp).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn layer_norm(a: &M, gamma: &[f64], beta: &[f64], eps: f64) -> M {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn add_row(a: &M, b: &[f64]) -> M {
    a.iter().map(|row| row.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

struct RefLayer {
    q: Vec<M>,
    k: Vec<M>,
    v: Vec<M>,
    o: M,
    ln1: (Vec<f64>, Vec<f64>),
    th: Option<(M, M, (Vec<f64>, Vec<f64>))>,
    w1: M,
    b1: Vec<f64>,
    w2: M,
    b2: Vec<f64>,
    ln2: (Vec<f64>, Vec<f64>),
}

const EPS: f64 = 1e-12;

fn ref_mha(h: &M, l: &RefLayer) -> M {
    let dk = l.q[0][0].len() as f64;
    let mut cat: M = vec![Vec::new(); h.len()];
    for i in 0..l.q.len() {
        let q = mm(h, &l.q[i]);
        let k = mm(h, &l.k[i]);
        let v = mm(h, &l.v[i]);
        let a = softmax(&mm(&q, &transpose(&k)), dk.sqrt());
        for (row, out) in cat.iter_mut().zip(mm(&a, &v)) {
            row.extend(out);
        }
    }
    mm(&cat, &l.o)
}

fn ref_ffn(x: &M, l: &RefLayer) -> M {
    let a: M = add_row(&mm(x, &l.w1), &l.b1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    add_row(&mm(&a, &l.w2), &l.b2)
}

fn ref_layer(h: &M, mtr: Option<&M>, l: &RefLayer) -> M {
    let mut mid = layer_norm(&add(h, &ref_mha(h, l)), &l.ln1.0, &l.ln1.1, EPS);
    if let (Some(mtr), Some((wv, wo, ln))) = (mtr, &l.th) {
        let th = mm(&mm(mtr, &mm(h, wv)), wo);
        mid = add(&mid, &layer_norm(&add(h, &th), &ln.0, &ln.1, EPS));
    }
    layer_norm(&add(&mid, &ref_ffn(&mid, l)), &l.ln2.0, &l.ln2.1, EPS)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, center: f64) -> Vec<f64> {
    (0..n).map(|_| center + rng.gen_range(-0.5..0.5)).collect()
}

fn rand_layer(rng: &mut ChaCha8Rng, d: usize, heads: usize, ffn: usize, with_th: bool) -> RefLayer {
    let hd = d / heads;
    RefLayer {
        q: (0..heads).map(|_| rand_mat(rng, d, hd)).collect(),
        k: (0..heads).map(|_| rand_mat(rng, d, hd)).collect(),
        v: (0..heads).map(|_| rand_mat(rng, d, hd)).collect(),
        o: rand_mat(rng, d, d),
        ln1: (rand_vec(rng, d, 1.0), rand_vec(rng, d, 0.0)),
        th: with_th.then(|| (rand_mat(rng, d, d), rand_mat(rng, d, d), (rand_vec(rng, d, 1.0), rand_vec(rng, d, 0.0)))),
        w1: rand_mat(rng, d, ffn),
        b1: rand_vec(rng, ffn, 0.0),
        w2: rand_mat(rng, ffn, d),
        b2: rand_vec(rng, d, 0.0),
        ln2: (rand_vec(rng, d, 1.0), rand_vec(rng, d, 0.0)),
    }
}

fn leaf_m(g: &mut Graph<'_, f64>, m: &M) -> Var {
    g.leaf(Tensor::from_rows(m), true)
}

fn leaf_v(g: &mut Graph<'_, f64>, v: &[f64]) -> Var {
    g.leaf(Tensor::new(vec![v.len()], v.to_vec()).unwrap(), true)
}

fn bind_layer(g: &mut Graph<'_, f64>, l: &RefLayer) -> LayerVars {
    let norm = |g: &mut Graph<'_, f64>, p: &(Vec<f64>, Vec<f64>)| NormVars {
        gamma: leaf_v(g, &p.0),
        beta: leaf_v(g, &p.1),
    };
    let attn = AttentionVars {
        query: l.q.iter().map(|m| leaf_m(g, m)).collect(),
        key: l.k.iter().map(|m| leaf_m(g, m)).collect(),
        value: l.v.iter().map(|m| leaf_m(g, m)).collect(),
        out: leaf_m(g, &l.o),
    };
    let ln_attn = norm(g, &l.ln1);
    let th = l.th.as_ref().map(|(wv, wo, ln)| TranslationHeadVars {
        value: leaf_m(g, wv),
        out: leaf_m(g, wo),
        norm: norm(g, ln),
    });
    let ffn = FfnVars {
        w1: leaf_m(g, &l.w1),
        b1: leaf_v(g, &l.b1),
        w2: leaf_m(g, &l.w2),
        b2: leaf_v(g, &l.b2),
    };
    let ln_out = norm(g, &l.ln2);
    LayerVars {
        attn,
        ln_attn,
        th,
        ffn,
        ln_out,
    }
}

fn assert_close(got: &Tensor<f64>, want: &M, tol: f64) {
    assert_eq!(got.shape(), &[want.len(), want[0].len()]);
    for (r, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            assert!((got.at(r, c) - w).abs() < tol, "({r},{c}): {} vs {w}", got.at(r, c));
        }
    }
}

fn row_stochastic(rng: &mut ChaCha8Rng, m: usize) -> M {
    let raw: M = (0..m).map(|_| (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    raw.iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|x| x / s).collect()
        })
        .collect()
}

#[test]
fn multi_head_attention_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = rand_mat(&mut rng, 3, 8);
    let l = rand_layer(&mut rng, 8, 2, 16, false);
    let mut g = Graph::new();
    let hv = leaf_m(&mut g, &h);
    let lv = bind_layer(&mut g, &l);
    let out = multi_head_attention(&mut g, hv, &lv.attn).unwrap();
    assert_close(g.value(out), &ref_mha(&h, &l), 1e-12);
}

#[test]
fn vanilla_layer_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in [1, 3, 6] {
        let h = rand_mat(&mut rng, m, 8);
        let l = rand_layer(&mut rng, 8, 2, 16, false);
        let mut g = Graph::new();
        let hv = leaf_m(&mut g, &h);
        let lv = bind_layer(&mut g, &l);
        let out = vanilla_layer(&mut g, hv, &lv, EPS, None).unwrap();
        assert_close(g.value(out), &ref_layer(&h, None, &l), 1e-10);
    }
}

#[test]
fn mat_layer_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in [1, 4, 7] {
        let h = rand_mat(&mut rng, m, 8);
        let l = rand_layer(&mut rng, 8, 2, 16, true);
        let mtr = row_stochastic(&mut rng, m);
        let mut g = Graph::new();
        let hv = leaf_m(&mut g, &h);
        let mv = g.leaf(Tensor::from_rows(&mtr), false);
        let lv = bind_layer(&mut g, &l);
        let out = mat_layer(&mut g, hv, mv, &lv, EPS, None).unwrap();
        assert_close(g.value(out), &ref_layer(&h, Some(&mtr), &l), 1e-10);
    }
}

#[test]
fn mat_layer_with_identity_matrix_differs_from_vanilla() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let h = rand_mat(&mut rng, 4, 8);
        let l = rand_layer(&mut rng, 8, 2, 16, true);
        let mut g = Graph::new();
        let hv = leaf_m(&mut g, &h);
        let eye = g.leaf(Tensor::eye(4), false);
        let lv = bind_layer(&mut g, &l);
        let mat = mat_layer(&mut g, hv, eye, &lv, EPS, None).unwrap();
        let van = vanilla_layer(&mut g, hv, &lv, EPS, None).unwrap();
        let gap: f64 = g
            .value(mat)
            .data()
            .iter()
            .zip(g.value(van).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(gap > 1e-3, "gap {gap}");
    }
}

/// `|a − b| / max(|a|, |b|, 1e-6)`
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn mat_layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = rand_mat(&mut rng, 3, 4);
    let l = rand_layer(&mut rng, 4, 2, 6, true);
    let mtr = row_stochastic(&mut rng, 3);
    let weights = rand_mat(&mut rng, 3, 4);
    let build = |l: &RefLayer| {
        let mut g = Graph::new();
        let hv = leaf_m(&mut g, &h);
        let mv = g.leaf(Tensor::from_rows(&mtr), false);
        let lv = bind_layer(&mut g, l);
        let out = mat_layer(&mut g, hv, mv, &lv, EPS, None).unwrap();
        let w = g.leaf(Tensor::from_rows(&weights), false);
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        (g, lv, loss)
    };
    let (g, lv, loss) = build(&l);
    let grads = g.backward(loss).unwrap();
    let loss_of = |l: &RefLayer| {
        let (g, _, loss) = build(l);
        g.value(loss).item()
    };
    type Access = Box<dyn Fn(&mut RefLayer) -> &mut Vec<f64>>;
    let th = lv.th.unwrap();
    let mats: Vec<(Var, Box<dyn Fn(&mut RefLayer) -> &mut M>)> = vec![
        (lv.attn.query[0], Box::new(|l| &mut l.q[0])),
        (lv.attn.key[1], Box::new(|l| &mut l.k[1])),
        (lv.attn.value[0], Box::new(|l| &mut l.v[0])),
        (lv.attn.out, Box::new(|l| &mut l.o)),
        (th.value, Box::new(|l| &mut l.th.as_mut().unwrap().0)),
        (th.out, Box::new(|l| &mut l.th.as_mut().unwrap().1)),
        (lv.ffn.w1, Box::new(|l| &mut l.w1)),
        (lv.ffn.w2, Box::new(|l| &mut l.w2)),
    ];
    let vecs: Vec<(Var, Access)> = vec![
        (lv.ffn.b1, Box::new(|l| &mut l.b1)),
        (lv.ffn.b2, Box::new(|l| &mut l.b2)),
        (lv.ln_attn.gamma, Box::new(|l| &mut l.ln1.0)),
        (lv.ln_attn.beta, Box::new(|l| &mut l.ln1.1)),
        (th.norm.gamma, Box::new(|l| &mut l.th.as_mut().unwrap().2 .0)),
        (th.norm.beta, Box::new(|l| &mut l.th.as_mut().unwrap().2 .1)),
        (lv.ln_out.gamma, Box::new(|l| &mut l.ln2.0)),
        (lv.ln_out.beta, Box::new(|l| &mut l.ln2.1)),
    ];
    let step = 1e-6;
    let mut checked = 0;
    for (var, access) in &mats {
        let grad = grads.get(*var).unwrap();
        let (rows, cols) = (grad.rows(), grad.cols());
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = clone_layer(&l);
                access(&mut plus)[r][c] += step;
                let mut minus = clone_layer(&l);
                access(&mut minus)[r][c] -= step;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
                assert!(rel_err(grad.at(r, c), fd) < 1e-4, "{var:?} ({r},{c}): {} vs {fd}", grad.at(r, c));
                checked += 1;
            }
        }
    }
    for (var, access) in &vecs {
        let grad = grads.get(*var).unwrap();
        for i in 0..grad.len() {
            let mut plus = clone_layer(&l);
            access(&mut plus)[i] += step;
            let mut minus = clone_layer(&l);
            access(&mut minus)[i] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            assert!(rel_err(grad.data()[i], fd) < 1e-4, "{var:?} [{i}]: {} vs {fd}", grad.data()[i]);
            checked += 1;
        }
    }
    assert_eq!(checked, 154);
}

fn clone_layer(l: &RefLayer) -> RefLayer {
    RefLayer {
        q: l.q.clone(),
        k: l.k.clone(),
        v: l.v.clone(),
        o: l.o.clone(),
        ln1: l.ln1.clone(),
        th: l.th.clone(),
        w1: l.w1.clone(),
        b1: l.b1.clone(),
        w2: l.w2.clone(),
        b2: l.b2.clone(),
        ln2: l.ln2.clone(),
    }
}

fn tiny_vocab() -> Vocab {
    let pieces = ["a", "b", "c", "d", "e", "f", "g", "h"].map(String::from).to_vec();
    Vocab::from_parts(pieces, vec![]).unwrap()
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    let r = common::model_gradient_check();
    assert_eq!(r.failed, 0, "{} of {} entries off, worst relative error {:e}", r.failed, r.checked, r.max_rel);
}

#[test]
fn th_application_pulls_translated_pair_together() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    for _ in 0..100 {
        let p: f64 = rng.gen_range(0.01..1.0);
        let ha: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hb: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (1.0 / (1.0 + p), p / (1.0 + p));
        let mut g = Graph::<f64>::new();
        let h = g.leaf(Tensor::from_rows(&[ha.clone(), hb.clone()]), false);
        let mtr = g.leaf(Tensor::from_rows(&[vec![a, b], vec![b, a]]), false);
        let eye = g.leaf(Tensor::eye(6), false);
        let one = g.leaf(Tensor::eye(1), false);
        let th = TranslationHeadVars {
            value: eye,
            out: eye,
            norm: NormVars { gamma: one, beta: one },
        };
        let out = mart_core::model::translation_head(&mut g, h, mtr, &th).unwrap();
        let t = g.value(out);
        let before = cos(&ha, &hb);
        if before > 1.0 - 1e-9 {
            continue;
        }
        assert!(cos(t.row(0), t.row(1)) > before);
    }
}

#[test]
fn placebo_model_runs_like_identity_matrix() {
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        layers: 3,
        mat_layers: [1, 2].into(),
        ffn_hidden: 12,
        max_len: 12,
        vocab_size: 12,
        ..ModelConfig::default()
    };
    let model = MartModel::<f64>::assemble(cfg, 1).unwrap();
    let seq = encode_pair(&["a"], &["c", "d"], &tiny_vocab());
    let empty = build_mtr(&seq, &TranslationTable::default());
    let placebo = build_placebo(seq.len()).unwrap();
    assert_eq!(
        model.score_last_int(&[seq.clone()], &[empty]).unwrap(),
        model.score_last_int(&[seq], &[placebo]).unwrap()
    );
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn convex_mixing_example() {
    let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
    let mix = |x: f64, y: f64| [x * a[0] + y * b[0], x * a[1] + y * b[1]];
    let c = cosine(&mix(0.7, 0.3), &mix(0.3, 0.7));
    assert!((c - 0.7241).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn convex_mixing_never_lowers_cosine(
        a in prop::collection::vec(-10.0f64..10.0, 4),
        b in prop::collection::vec(-10.0f64..10.0, 4),
        alpha in 0.001f64..0.999,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let beta = 1.0 - alpha;
        let u: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| beta * x + alpha * y).collect();
        prop_assume!(u.iter().any(|x| x.abs() > 1e-9) && v.iter().any(|x| x.abs() > 1e-9));
        prop_assert!(cosine(&u, &v) >= cosine(&a, &b) - 1e-9);
    }
}
