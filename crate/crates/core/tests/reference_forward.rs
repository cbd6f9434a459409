//! Straight-line reference implementations of the model's building blocks,
//! written with plain nested loops and no tape, compared against the library
//! forward pass on random inputs. These are the independent oracles for the
//! attention formula, the transformer layer, both fusion stages, and the
//! classifier heads.

use std::collections::BTreeMap;

use mmerc_core::data::{Modality, ALL_MODALITIES};
use mmerc_core::encoder::TransformerBlock;
use mmerc_core::fusion::{Fusion, FusionKind};
use mmerc_core::heads::ClassifierHead;
use mmerc_core::params::{ParamId, ParamStore};
use mmerc_core::rng::Rng;
use mmerc_core::tape::Tape;
use mmerc_core::tensor::Tensor;

type Mat = Vec<Vec<f64>>;

fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.normal()).collect()).collect()
}

fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn param_mat(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.value(id);
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| t.get2(i, j)).collect())
        .collect()
}

fn param_vec(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// Multi-head scaled dot-product attention, one head slice at a time.
fn ref_attention(q_in: &Mat, kv_in: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize) -> Mat {
    let d = wq.len();
    let dh = d / heads;
    let q = matmul(q_in, wq);
    let k = matmul(kv_in, wk);
    let v = matmul(kv_in, wv);
    let tq = q_in.len();
    let tk = kv_in.len();

    let mut concat = vec![vec![0.0; d]; tq];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..tq {
            // Logits for query i against every key, this head only.
            let mut logits = vec![0.0; tk];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in cols.clone() {
                    dot += q[i][c] * k[j][c];
                }
                *logit = dot / (dh as f64).sqrt();
            }
            let weights = softmax_row(&logits);
            for c in cols.clone() {
                let mut acc = 0.0;
                for (j, w) in weights.iter().enumerate() {
                    acc += w * v[j][c];
                }
                concat[i][c] = acc;
            }
        }
    }
    matmul(&concat, wo)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn relu(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|v| v.max(0.0)).collect())
        .collect()
}

#[test]
fn attention_matches_direct_formula_on_2x2() {
    let mut rng = Rng::new(100);
    let d = 2;
    let mut store = ParamStore::new();
    let block = TransformerBlock::init(&mut store, "b", d, 1, 4, &mut rng).unwrap();
    let q_in = rand_mat(&mut rng, 2, d);
    let kv_in = rand_mat(&mut rng, 2, d);

    let expect = ref_attention(
        &q_in,
        &kv_in,
        &param_mat(&store, block.wq),
        &param_mat(&store, block.wk),
        &param_mat(&store, block.wv),
        &param_mat(&store, block.wo),
        1,
    );

    let mut tape = Tape::new();
    let q = tape.constant(to_tensor(&q_in));
    let kv = tape.constant(to_tensor(&kv_in));
    let (out, _) = block
        .attention(&mut tape, &store, q, kv, &[true, true], 0.0, None)
        .unwrap();
    assert!(tape.value(out).max_abs_diff(&to_tensor(&expect)) < 1e-12);
}

#[test]
fn attention_matches_reference_multi_head() {
    let mut rng = Rng::new(101);
    let d = 8;
    let mut store = ParamStore::new();
    let block = TransformerBlock::init(&mut store, "b", d, 4, 8, &mut rng).unwrap();
    let q_in = rand_mat(&mut rng, 5, d);
    let kv_in = rand_mat(&mut rng, 3, d);

    let expect = ref_attention(
        &q_in,
        &kv_in,
        &param_mat(&store, block.wq),
        &param_mat(&store, block.wk),
        &param_mat(&store, block.wv),
        &param_mat(&store, block.wo),
        4,
    );

    let mut tape = Tape::new();
    let q = tape.constant(to_tensor(&q_in));
    let kv = tape.constant(to_tensor(&kv_in));
    let (out, _) = block
        .attention(&mut tape, &store, q, kv, &[true; 3], 0.0, None)
        .unwrap();
    assert!(tape.value(out).max_abs_diff(&to_tensor(&expect)) < 1e-11);
}

#[test]
fn transformer_block_matches_reference_forward() {
    // Full random 3x8 block against an independently coded reference.
    let mut rng = Rng::new(102);
    let d = 8;
    let eps = 1e-5;
    let mut store = ParamStore::new();
    let block = TransformerBlock::init(&mut store, "b", d, 2, 16, &mut rng).unwrap();
    let q_in = rand_mat(&mut rng, 3, d);
    let kv_in = rand_mat(&mut rng, 3, d);

    let attn = ref_attention(
        &q_in,
        &kv_in,
        &param_mat(&store, block.wq),
        &param_mat(&store, block.wk),
        &param_mat(&store, block.wv),
        &param_mat(&store, block.wo),
        2,
    );
    let x = layer_norm(
        &add(&q_in, &attn),
        &param_vec(&store, block.ln1_gamma),
        &param_vec(&store, block.ln1_beta),
        eps,
    );
    let hidden = relu(&matmul(&x, &param_mat(&store, block.w1)));
    let ffn = matmul(&hidden, &param_mat(&store, block.w2));
    let expect = layer_norm(
        &add(&x, &ffn),
        &param_vec(&store, block.ln2_gamma),
        &param_vec(&store, block.ln2_beta),
        eps,
    );

    let mut tape = Tape::new();
    let q = tape.constant(to_tensor(&q_in));
    let kv = tape.constant(to_tensor(&kv_in));
    let (out, _) = block
        .encode(&mut tape, &store, q, kv, &[true; 3], 0.0, None, eps)
        .unwrap();
    assert!(tape.value(out).max_abs_diff(&to_tensor(&expect)) < 1e-11);
}

#[test]
fn unimodal_fusion_matches_gate_concat_affine_reference() {
    let mut rng = Rng::new(103);
    let d = 4;
    let n = 3;
    let mut store = ParamStore::new();
    let fusion = Fusion::init(
        FusionKind::Gated,
        &mut store,
        &ALL_MODALITIES,
        d,
        false,
        &mut rng,
    )
    .unwrap();
    let Fusion::Gated(g) = &fusion else { unreachable!() };

    let mut tape = Tape::new();
    let mut grid = BTreeMap::new();
    let mut raw = BTreeMap::new();
    for &dst in &ALL_MODALITIES {
        for &src in &ALL_MODALITIES {
            let m = rand_mat(&mut rng, n, d);
            grid.insert((src, dst), tape.constant(to_tensor(&m)));
            raw.insert((src, dst), m);
        }
    }

    for &target in &ALL_MODALITIES {
        // Reference: gate each source, concatenate (target pair first, then
        // canonical order), then affine.
        let order: Vec<Modality> = std::iter::once(target)
            .chain(ALL_MODALITIES.iter().copied().filter(|&m| m != target))
            .collect();
        let mut cat: Mat = vec![Vec::new(); n];
        for &src in &order {
            let h = &raw[&(src, target)];
            let w = param_mat(&store, g.gates[&(src, target)]);
            let gate = matmul(h, &w);
            for i in 0..n {
                for j in 0..d {
                    cat[i].push(h[i][j] * sigmoid(gate[i][j]));
                }
            }
        }
        let w = param_mat(&store, g.uni_w[&target]);
        let b = param_vec(&store, g.uni_b[&target]);
        let mut expect = matmul(&cat, &w);
        for row in expect.iter_mut() {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }

        let out = fusion
            .unimodal(&mut tape, &store, &grid, &ALL_MODALITIES, target)
            .unwrap();
        assert!(
            tape.value(out).max_abs_diff(&to_tensor(&expect)) < 1e-12,
            "target {target}"
        );
    }
}

#[test]
fn multimodal_fusion_matches_per_dimension_softmax_reference() {
    let mut rng = Rng::new(104);
    let d = 5;
    let n = 4;
    let mut store = ParamStore::new();
    let fusion = Fusion::init(
        FusionKind::Gated,
        &mut store,
        &ALL_MODALITIES,
        d,
        false,
        &mut rng,
    )
    .unwrap();
    let Fusion::Gated(g) = &fusion else { unreachable!() };
    let w = param_mat(&store, g.multi_w);

    let mut tape = Tape::new();
    let mut enhanced = BTreeMap::new();
    let mut raw = BTreeMap::new();
    for &m in &ALL_MODALITIES {
        let h = rand_mat(&mut rng, n, d);
        enhanced.insert(m, tape.constant(to_tensor(&h)));
        raw.insert(m, h);
    }

    // Reference: per utterance and per dimension, a 3-way softmax over the
    // projected values, then the convex combination.
    let z: BTreeMap<Modality, Mat> =
        ALL_MODALITIES.iter().map(|&m| (m, matmul(&raw[&m], &w))).collect();
    let mut expect = vec![vec![0.0; d]; n];
    for (i, row) in expect.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let logits: Vec<f64> = ALL_MODALITIES.iter().map(|m| z[m][i][j]).collect();
            let gates = softmax_row(&logits);
            *cell = ALL_MODALITIES
                .iter()
                .zip(&gates)
                .map(|(m, g)| raw[m][i][j] * g)
                .sum();
        }
    }

    let (fused, gates) = fusion
        .multimodal(&mut tape, &store, &enhanced, &ALL_MODALITIES)
        .unwrap();
    assert!(tape.value(fused).max_abs_diff(&to_tensor(&expect)) < 1e-12);

    // And the exported gates match the same softmax.
    let gates = gates.unwrap();
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        for j in 0..d {
            let logits: Vec<f64> = ALL_MODALITIES.iter().map(|m| z[m][i][j]).collect();
            let oracle = softmax_row(&logits);
            for (m, o) in ALL_MODALITIES.iter().zip(&oracle) {
                assert!((tape.value(gates[m]).get2(i, j) - o).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn teacher_head_matches_affine_softmax_reference() {
    let mut rng = Rng::new(105);
    let (d, c, n) = (6, 4, 3);
    let mut store = ParamStore::new();
    let head = ClassifierHead::init(&mut store, "teacher", d, c, &mut rng).unwrap();
    let fused = rand_mat(&mut rng, n, d);

    let w = param_mat(&store, head.w);
    let b = param_vec(&store, head.b);
    let mut logits = matmul(&fused, &w);
    for row in logits.iter_mut() {
        for (v, bv) in row.iter_mut().zip(&b) {
            *v += bv;
        }
    }
    let expect: Mat = logits.iter().map(|r| softmax_row(r)).collect();

    let mut tape = Tape::new();
    let f = tape.constant(to_tensor(&fused));
    let (_, probs) = head.teacher_forward(&mut tape, &store, f).unwrap();
    assert!(tape.value(probs).max_abs_diff(&to_tensor(&expect)) < 1e-12);
}

#[test]
fn student_head_matches_relu_affine_softened_reference() {
    let mut rng = Rng::new(106);
    let (d, c, n) = (5, 3, 4);
    let tau = 8.0;
    let mut store = ParamStore::new();
    let head = ClassifierHead::init(&mut store, "student.t", d, c, &mut rng).unwrap();
    let h_m = rand_mat(&mut rng, n, d);

    let w = param_mat(&store, head.w);
    let b = param_vec(&store, head.b);
    let mut logits = matmul(&relu(&h_m), &w);
    for row in logits.iter_mut() {
        for (v, bv) in row.iter_mut().zip(&b) {
            *v += bv;
        }
    }
    let probs_expect: Mat = logits.iter().map(|r| softmax_row(r)).collect();
    let soft_expect: Mat = logits
        .iter()
        .map(|r| softmax_row(&r.iter().map(|v| v / tau).collect::<Vec<_>>()))
        .collect();

    let mut tape = Tape::new();
    let h = tape.constant(to_tensor(&h_m));
    let out = head.student_forward(&mut tape, &store, h, tau).unwrap();
    assert!(tape.value(out.probs).max_abs_diff(&to_tensor(&probs_expect)) < 1e-12);
    assert!(tape.value(out.soft).max_abs_diff(&to_tensor(&soft_expect)) < 1e-12);
}
