mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vulngraph::model::{predict_proba, GraphInput, ModelParams};
use vulngraph::numeric::{Tape, Var};
use vulngraph::tokenizer::TokenSequence;
use vulngraph::train::objective;
use vulngraph::{build_graph, Architecture, Construction, GnnKind, Matrix, Mix};

type OpCase = (Vec<Matrix>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::uniform(rows, cols, 1.0, rng)
}

/// Checks the gradient of `sum(op(inputs) * weights)` against central
/// differences on each input.
fn check_op(inputs: Vec<Matrix>, op: impl Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[Matrix], weights: Option<&Matrix>| -> (f64, Matrix, Vec<Matrix>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = op(&mut tape, &vars);
        let (r, c) = tape.value(out).shape();
        let w = weights.cloned().unwrap_or_else(|| Matrix::zeros(r, c));
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let s = tape.sum(prod);
        let value = tape.value(s).get(0, 0);
        let g = tape.backward(s).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| {
                g.get(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()))
            })
            .collect();
        (value, w, grads)
    };
    let (_, shape_probe, _) = eval(&inputs, None);
    let weights = random(shape_probe.rows(), shape_probe.cols(), &mut rng);
    let (_, _, analytic) = eval(&inputs, Some(&weights));
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            let fp = eval(&plus, Some(&weights)).0;
            let fm = eval(&minus, Some(&weights)).0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    worst
}

fn away_from_zero(mut m: Matrix) -> Matrix {
    for v in m.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_and_linear_ops(seed in any::<u64>(), m in 1usize..4, n in 1usize..4, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(m, n, &mut rng);
        let b = random(m, n, &mut rng);
        let c = random(n, k, &mut rng);
        let row = random(1, n, &mut rng);
        let col = random(m, 1, &mut rng);
        let cases: Vec<OpCase> = vec![
            (vec![a.clone(), c.clone()], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
            (vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
            (vec![a.clone()], Box::new(|t, v| t.affine(v[0], -1.5, 0.25))),
            (vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap())),
            (vec![a.clone(), col.clone()], Box::new(|t, v| t.mul_col(v[0], v[1]).unwrap())),
            (vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
            (vec![a.clone()], Box::new(|t, v| t.tanh(v[0]))),
            (vec![away_from_zero(a.clone())], Box::new(|t, v| t.relu(v[0]))),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.concat_cols(v[0], v[1]).unwrap())),
            (vec![a.clone(), b.clone()], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
            (vec![a.clone()], Box::new(|t, v| t.sum_over_rows(v[0]).unwrap())),
            (vec![a.clone()], Box::new(|t, v| t.max_over_rows(v[0]).unwrap())),
            (vec![a.clone()], Box::new(|t, v| t.sum_squares(v[0]))),
            (vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ];
        for (i, (inputs, op)) in cases.into_iter().enumerate() {
            let err = check_op(inputs, op, seed ^ i as u64);
            prop_assert!(err < FD_TOLERANCE, "case {} rel err {}", i, err);
        }
    }

    #[test]
    fn gather_and_cross_entropy(seed in any::<u64>(), rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random(4, 3, &mut rng);
        let ids: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..4)).collect();
        let err = check_op(vec![table], move |t, v| t.gather_rows(v[0], &ids).unwrap(), seed);
        prop_assert!(err < FD_TOLERANCE, "gather rel err {}", err);

        let logits = random(rows, 2, &mut rng).map(|x| 3.0 * x);
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..2)).collect();
        let err = check_op(vec![logits], move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(), seed);
        prop_assert!(err < FD_TOLERANCE, "cross-entropy rel err {}", err);
    }
}

fn graph_input(ids: &[usize], window: usize, c: Construction, label: usize) -> GraphInput {
    let seq = TokenSequence::new(ids.to_vec()).unwrap();
    GraphInput::from_graph(&build_graph(&seq, window, c).unwrap(), 0, label)
}

#[test]
fn library_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for base in [GnnKind::Gcn, GnnKind::Ggnn] {
        for mix in Mix::ALL {
            for residual in [true, false] {
                let arch = Architecture {
                    base,
                    layers: 3,
                    hidden: 6,
                    mix,
                    residual,
                    share_ggnn_params: false,
                };
                let params = ModelParams::init(&arch, 12, &mut rng);
                for _ in 0..10 {
                    let ids = random_ids(&mut rng, 30, 10);
                    let g = graph_input(&ids, 3, Construction::Unique, 1);
                    let lib = predict_proba(&params, &arch, &g).unwrap();
                    let oracle = reference_proba(&params, &arch, &g);
                    assert!((lib[0] - oracle[0]).abs() < 1e-12, "{lib:?} vs {oracle:?}");
                    assert!((lib[1] - oracle[1]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn batch_objective_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arch = Architecture {
        base: GnnKind::Ggnn,
        layers: 2,
        hidden: 3,
        mix: Mix::Concat,
        residual: true,
        share_ggnn_params: true,
    };
    let mut params = ModelParams::init(&arch, 8, &mut rng);
    randomize_biases(&mut params, &mut rng);
    let graphs: Vec<GraphInput> = (0..3)
        .map(|i| graph_input(&random_ids(&mut rng, 9, 6), 3, Construction::Index, i % 2))
        .collect();
    let batch: Vec<&GraphInput> = graphs.iter().collect();
    for freeze in [false, true] {
        let eval = objective(&params, &arch, &batch, 1e-2, freeze).unwrap();
        let expected = reference_loss(&params, &arch, &batch, 1e-2, freeze);
        assert!((eval.loss - expected).abs() < 1e-12);
        let analytic: Vec<Matrix> = eval
            .grads
            .iter()
            .zip(params.tensors())
            .map(|(g, (_, t))| {
                g.clone()
                    .unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols()))
            })
            .collect();
        if freeze {
            assert!(eval.grads[0].is_none());
            continue;
        }
        let (err, at) = fd_max_rel_error(&params, &analytic, |p| {
            reference_loss(p, &arch, &batch, 1e-2, false)
        });
        assert!(err < FD_TOLERANCE, "rel err {err} at {at}");
    }
}
