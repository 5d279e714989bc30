//! Independent reference implementations used as test oracles: a plain-loop
//! forward pass, central finite differences over it, a window-enumeration
//! graph builder, and a synthetic marker-token corpus.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vulngraph::data::CodeSample;
use vulngraph::gnn::LayerParams;
use vulngraph::model::{GraphInput, ModelParams};
use vulngraph::{Architecture, Construction, Matrix, Mix};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Absolute differences at or below this are treated as agreement.
pub const FD_ABS_FLOOR: f64 = 1e-8;

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// `a * b^T` for row-major nested vectors.
fn mul_bt(a: &Rows, b: &Matrix) -> Rows {
    a.iter()
        .map(|row| {
            (0..b.rows())
                .map(|j| row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

fn adj_mul(adj: &Matrix, h: &Rows) -> Rows {
    let d = h[0].len();
    (0..adj.rows())
        .map(|i| {
            let mut out = vec![0.0; d];
            for (j, hj) in h.iter().enumerate() {
                let w = adj.get(i, j);
                for c in 0..d {
                    out[c] += w * hj[c];
                }
            }
            out
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn zip2(a: &Rows, b: &Rows, f: impl Fn(f64, f64) -> f64) -> Rows {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect())
        .collect()
}

fn layer(h: &Rows, adj: &Matrix, p: &LayerParams) -> Rows {
    let a = adj_mul(adj, h);
    match p {
        LayerParams::Gcn(g) => mul_bt(&a, &g.weight)
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.max(0.0)).collect())
            .collect(),
        LayerParams::Ggnn(g) => {
            let z = zip2(&mul_bt(&a, &g.w_z), &mul_bt(h, &g.u_z), |x, y| {
                sigmoid(x + y)
            });
            let r = zip2(&mul_bt(&a, &g.w_r), &mul_bt(h, &g.u_r), |x, y| {
                sigmoid(x + y)
            });
            let rh = zip2(&r, h, |x, y| x * y);
            let cand = zip2(&mul_bt(&a, &g.w_o), &mul_bt(&rh, &g.u_o), |x, y| {
                (x + y).tanh()
            });
            let keep = zip2(&z, h, |zz, hh| (1.0 - zz) * hh);
            let upd = zip2(&z, &cand, |zz, cc| zz * cc);
            zip2(&keep, &upd, |x, y| x + y)
        }
    }
}

/// Graph embedding computed with nested loops only.
pub fn reference_embedding(params: &ModelParams, arch: &Architecture, g: &GraphInput) -> Vec<f64> {
    let emb = rows_of(&params.embedding);
    let mut h: Rows = g.node_token_ids.iter().map(|&t| emb[t].clone()).collect();
    for k in 0..arch.layers {
        let p = &params.layers[k.min(params.layers.len() - 1)];
        let out = layer(&h, &g.adjacency, p);
        h = if arch.residual {
            zip2(&h, &out, |x, y| x + y)
        } else {
            out
        };
    }
    let ro = &params.readout;
    let d = arch.hidden;
    let scores: Rows = h
        .iter()
        .map(|hv| {
            let gate_pre: f64 = hv
                .iter()
                .enumerate()
                .map(|(c, x)| x * ro.gate_w.get(c, 0))
                .sum::<f64>()
                + ro.gate_b.get(0, 0);
            let gate = sigmoid(gate_pre);
            (0..d)
                .map(|o| {
                    let lin: f64 = hv
                        .iter()
                        .enumerate()
                        .map(|(c, x)| x * ro.transform_w.get(o, c))
                        .sum::<f64>()
                        + ro.transform_b.get(0, o);
                    gate * lin.max(0.0)
                })
                .collect()
        })
        .collect();
    let s: Vec<f64> = (0..d).map(|c| scores.iter().map(|r| r[c]).sum()).collect();
    let x: Vec<f64> = (0..d)
        .map(|c| {
            scores
                .iter()
                .map(|r| r[c])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    match arch.mix {
        Mix::Sum => s.iter().zip(&x).map(|(a, b)| a + b).collect(),
        Mix::Mul => s.iter().zip(&x).map(|(a, b)| a * b).collect(),
        Mix::Concat => s.iter().chain(&x).copied().collect(),
    }
}

pub fn reference_proba(params: &ModelParams, arch: &Architecture, g: &GraphInput) -> [f64; 2] {
    let e = reference_embedding(params, arch, g);
    let c = &params.classifier;
    let z: Vec<f64> = (0..2)
        .map(|k| {
            e.iter()
                .enumerate()
                .map(|(j, v)| v * c.weight.get(k, j))
                .sum::<f64>()
                + c.bias.get(0, k)
        })
        .collect();
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Mean cross-entropy plus `lambda` times the squared norm of every tensor
/// (the embedding table skipped when `skip_embedding`).
pub fn reference_loss(
    params: &ModelParams,
    arch: &Architecture,
    batch: &[&GraphInput],
    lambda: f64,
    skip_embedding: bool,
) -> f64 {
    let ce: f64 = batch
        .iter()
        .map(|g| -reference_proba(params, arch, g)[g.label].ln())
        .sum::<f64>()
        / batch.len() as f64;
    let reg: f64 = params
        .tensors()
        .iter()
        .enumerate()
        .filter(|(i, _)| !(skip_embedding && *i == 0))
        .map(|(_, (_, t))| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    ce + lambda * reg
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= FD_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Worst relative error between `analytic` (one matrix per tensor, in
/// declaration order) and central differences of `f`.
pub fn fd_max_rel_error(
    params: &ModelParams,
    analytic: &[Matrix],
    f: impl Fn(&ModelParams) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        let len = params.tensors()[t].1.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t].data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[t].data_mut()[i] -= FD_STEP;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            let err = relative_error(analytic[t].data()[i], numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]"));
            }
        }
    }
    worst
}

/// Graph built by sliding every window span over the sequence and linking
/// all pairs of distinct nodes inside each span.
pub fn window_oracle(
    ids: &[usize],
    window: usize,
    construction: Construction,
) -> (Vec<usize>, BTreeSet<(usize, usize)>) {
    let (nodes, node_at): (Vec<usize>, Vec<usize>) = match construction {
        Construction::Index => (ids.to_vec(), (0..ids.len()).collect()),
        Construction::Unique => {
            let mut nodes: Vec<usize> = Vec::new();
            let at = ids
                .iter()
                .map(|t| match nodes.iter().position(|n| n == t) {
                    Some(p) => p,
                    None => {
                        nodes.push(*t);
                        nodes.len() - 1
                    }
                })
                .collect();
            (nodes, at)
        }
    };
    let mut edges = BTreeSet::new();
    let span = window.min(ids.len());
    for start in 0..=ids.len() - span {
        let members = &node_at[start..start + span];
        for &a in members {
            for &b in members {
                if a < b {
                    edges.insert((a, b));
                }
            }
        }
    }
    (nodes, edges)
}

/// Samples whose label is 1 exactly when the marker token appears.
pub fn marker_corpus(n: usize, seed: u64) -> Vec<CodeSample> {
    const WORDS: [&str; 12] = [
        "int", "x", "y", "buf", "len", "=", "+", ";", "(", ")", "return", "if",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let len = rng.gen_range(8..20);
            let mut words: Vec<&str> = (0..len)
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                .collect();
            if label == 1 {
                let at = rng.gen_range(0..words.len());
                words[at] = "strcpy";
            }
            CodeSample {
                idx: i as i64,
                source: words.join(" "),
                label,
            }
        })
        .collect()
}

pub fn random_ids(rng: &mut impl Rng, max_len: usize, alphabet: usize) -> Vec<usize> {
    let l = rng.gen_range(1..=max_len);
    (0..l).map(|_| rng.gen_range(2..2 + alphabet)).collect()
}

/// Replaces the zero-initialised bias tensors with values bounded away from
/// zero, so that no ReLU input sits exactly on its kink.
pub fn randomize_biases(params: &mut ModelParams, rng: &mut impl Rng) {
    for b in [
        &mut params.readout.gate_b,
        &mut params.readout.transform_b,
        &mut params.classifier.bias,
    ] {
        for v in b.data_mut() {
            let mag = rng.gen_range(0.1..0.5);
            *v = if rng.gen_bool(0.5) { mag } else { -mag };
        }
    }
}
