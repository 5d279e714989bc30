//! Regularised cross-entropy objective, Adam, the epoch loop with
//! validation-based checkpoint selection, evaluation and ablation sweeps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, TrainConfig};
use crate::data::{prepare_graphs, stratified_subsample, CodeSample};
use crate::error::{Error, Result};
use crate::graph::Construction;
use crate::model::{cross_entropy_on, l2_on, predict_proba, GraphInput, ModelParams};
use crate::numeric::{Matrix, Tape};
use crate::readout::Mix;
use crate::tokenizer::Vocabulary;

pub const INIT_STREAM: u64 = 1;
pub const SHUFFLE_STREAM: u64 = 2;
/// Stream for embedding rows not covered by an imported table.
pub const EMBEDDING_STREAM: u64 = 3;

/// Deterministic generator for one purpose derived from the root seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Freshly initialised parameters for `config`, drawn from the root seed.
pub fn init_params(config: &TrainConfig, vocab_size: usize) -> ModelParams {
    ModelParams::init(
        &config.architecture(),
        vocab_size,
        &mut rng_for(config.seed, INIT_STREAM),
    )
}

/// Objective value and gradients for every tensor in declaration order;
/// `None` marks tensors that receive no update.
#[derive(Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub cross_entropy: f64,
    pub grads: Vec<Option<Matrix>>,
}

fn add_grads(into: &mut [Option<Matrix>], from: Vec<Option<Matrix>>) {
    for (slot, g) in into.iter_mut().zip(from) {
        match (slot.as_mut(), g) {
            (Some(a), Some(b)) => a.add_assign(&b),
            (None, Some(b)) => *slot = Some(b),
            _ => {}
        }
    }
}

fn ce_part(
    params: &ModelParams,
    arch: &Architecture,
    batch: &[&GraphInput],
    denominator: usize,
    freeze_embeddings: bool,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, arch);
    let ce = cross_entropy_on(&mut tape, &vars, arch, batch, denominator)?;
    let value = tape.value(ce).get(0, 0);
    let mut g = tape.backward(ce)?;
    let grads = vars
        .leaves
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i == 0 && freeze_embeddings {
                None
            } else {
                Some(g.take(v).unwrap_or_else(|| {
                    let (r, c) = tape.value(v).shape();
                    Matrix::zeros(r, c)
                }))
            }
        })
        .collect();
    Ok((value, grads))
}

/// Mean cross-entropy over `batch` plus `lambda` times the squared L2 norm of
/// the trainable tensors, with gradients, recorded on a single tape.
pub fn objective(
    params: &ModelParams,
    arch: &Architecture,
    batch: &[&GraphInput],
    lambda: f64,
    freeze_embeddings: bool,
) -> Result<ObjectiveEval> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, arch);
    let ce = cross_entropy_on(&mut tape, &vars, arch, batch, batch.len())?;
    let cross_entropy = tape.value(ce).get(0, 0);
    let reg_leaves = if freeze_embeddings {
        &vars.leaves[1..]
    } else {
        &vars.leaves[..]
    };
    let total = match l2_on(&mut tape, reg_leaves, lambda)? {
        Some(r) => tape.add(ce, r)?,
        None => ce,
    };
    let loss = tape.value(total).get(0, 0);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective (cross-entropy {cross_entropy})"
        )));
    }
    let mut g = tape.backward(total)?;
    let grads = vars
        .leaves
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i == 0 && freeze_embeddings {
                None
            } else {
                Some(g.take(v).unwrap_or_else(|| {
                    let (r, c) = tape.value(v).shape();
                    Matrix::zeros(r, c)
                }))
            }
        })
        .collect();
    Ok(ObjectiveEval {
        loss,
        cross_entropy,
        grads,
    })
}

/// Objective value only.
pub fn loss(
    params: &ModelParams,
    arch: &Architecture,
    batch: &[&GraphInput],
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, arch);
    let ce = cross_entropy_on(&mut tape, &vars, arch, batch, batch.len())?;
    let mut total = tape.value(ce).get(0, 0);
    if lambda != 0.0 {
        total += lambda
            * params
                .tensors()
                .iter()
                .map(|(_, t)| t.sum_squares())
                .sum::<f64>();
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(total)
}

/// Same quantity as [`objective`], with the batch split into `workers`
/// contiguous chunks evaluated in parallel and gradients summed in chunk
/// order.
pub fn objective_parallel(
    params: &ModelParams,
    arch: &Architecture,
    batch: &[&GraphInput],
    lambda: f64,
    freeze_embeddings: bool,
    workers: usize,
) -> Result<ObjectiveEval> {
    if workers <= 1 || batch.len() < 2 {
        return objective(params, arch, batch, lambda, freeze_embeddings);
    }
    let chunk = batch.len().div_ceil(workers);
    let parts: Vec<Result<(f64, Vec<Option<Matrix>>)>> = batch
        .par_chunks(chunk)
        .map(|c| ce_part(params, arch, c, batch.len(), freeze_embeddings))
        .collect();
    let mut cross_entropy = 0.0;
    let mut grads: Vec<Option<Matrix>> = vec![None; params.tensors().len()];
    for part in parts {
        let (v, g) = part?;
        cross_entropy += v;
        add_grads(&mut grads, g);
    }
    let mut loss = cross_entropy;
    if lambda != 0.0 {
        for (i, ((_, t), slot)) in params.tensors().into_iter().zip(&mut grads).enumerate() {
            if i == 0 && freeze_embeddings {
                continue;
            }
            loss += lambda * t.sum_squares();
            if let Some(g) = slot {
                for (gv, tv) in g.data_mut().iter_mut().zip(t.data()) {
                    *gv += 2.0 * lambda * tv;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective (cross-entropy {cross_entropy})"
        )));
    }
    Ok(ObjectiveEval {
        loss,
        cross_entropy,
        grads,
    })
}

/// First and second moment estimates for every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self::for_shapes(params.tensors().iter().map(|(_, t)| t.shape()))
    }

    pub fn for_shapes(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Matrix> = shapes
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Tensors whose gradient is `None` are left
/// untouched.
pub fn adam_step(
    params: Vec<&mut Matrix>,
    grads: &[Option<Matrix>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} tensors, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} for tensor {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let Some(g) = g else { continue };
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_acc: f64,
}

/// Renders the metric log as `epoch,train_loss,valid_acc` CSV.
pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,valid_acc\n");
    for m in log {
        s.push_str(&format!("{},{},{}\n", m.epoch, m.train_loss, m.valid_acc));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation accuracy
    /// (earliest on ties), or the initial parameters when no epoch ran.
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub best_valid_acc: Option<f64>,
    pub log: Vec<EpochMetrics>,
}

/// Runs `config.epochs` epochs of shuffled mini-batch Adam from `init`.
pub fn train(
    train_set: &[GraphInput],
    valid_set: &[GraphInput],
    config: &TrainConfig,
    init: ModelParams,
) -> Result<TrainOutcome> {
    train_with(train_set, valid_set, config, init, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    train_set: &[GraphInput],
    valid_set: &[GraphInput],
    config: &TrainConfig,
    init: ModelParams,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if valid_set.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let arch = config.architecture();
    init.validate(&arch)?;

    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = rng_for(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&GraphInput> = chunk.iter().map(|&i| &train_set[i]).collect();
            let eval = match &pool {
                Some(pool) => pool.install(|| {
                    objective_parallel(
                        &params,
                        &arch,
                        &batch,
                        config.lambda,
                        config.freeze_embeddings,
                        config.workers,
                    )
                }),
                None => objective(
                    &params,
                    &arch,
                    &batch,
                    config.lambda,
                    config.freeze_embeddings,
                ),
            }
            .map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}"))
                }
                e => e,
            })?;
            weighted_loss += eval.loss * batch.len() as f64;
            adam_step(params.tensors_mut(), &eval.grads, &mut adam, config.lr)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let valid_acc = evaluate(&params, &arch, valid_set)?.accuracy;
        let metrics = EpochMetrics {
            epoch,
            train_loss: weighted_loss / train_set.len() as f64,
            valid_acc,
        };
        on_epoch(&metrics);
        log.push(metrics);
        if best.as_ref().is_none_or(|(_, acc, _)| valid_acc > *acc) {
            best = Some((epoch, valid_acc, params.clone()));
        }
    }

    Ok(match best {
        Some((epoch, acc, p)) => TrainOutcome {
            best: p,
            best_epoch: Some(epoch),
            best_valid_acc: Some(acc),
            log,
        },
        None => TrainOutcome {
            best: params,
            best_epoch: None,
            best_valid_acc: None,
            log,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub idx: i64,
    pub label: usize,
    pub pred: usize,
    pub p_vulnerable: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[Prediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().filter(|p| p.pred == p.label).count();
    correct as f64 / predictions.len() as f64
}

/// Predicted label: 1 when `p_vulnerable > p_benign`.
pub fn predicted_label(probs: [f64; 2]) -> usize {
    usize::from(probs[1] > probs[0])
}

pub fn evaluate(
    params: &ModelParams,
    arch: &Architecture,
    split: &[GraphInput],
) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty split".into(),
        ));
    }
    let predictions = split
        .par_iter()
        .map(|g| {
            let probs = predict_proba(params, arch, g)?;
            Ok(Prediction {
                idx: g.idx,
                label: g.label,
                pred: predicted_label(probs),
                p_vulnerable: probs[1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        accuracy: accuracy(&predictions),
        predictions,
    })
}

/// Renders predictions as `idx,label,pred,p_vulnerable` CSV.
pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let mut s = String::from("idx,label,pred,p_vulnerable\n");
    for p in predictions {
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.idx, p.label, p.pred, p.p_vulnerable
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Residual,
    Mix,
    Window,
    Fraction,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Residual,
        AblationAxis::Mix,
        AblationAxis::Window,
        AblationAxis::Fraction,
    ];

    pub const FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
    pub const WINDOWS: [usize; 4] = [2, 3, 4, 5];
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "residual" => Ok(AblationAxis::Residual),
            "mix" => Ok(AblationAxis::Mix),
            "window" | "ws" => Ok(AblationAxis::Window),
            "fraction" => Ok(AblationAxis::Fraction),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation axis {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationAxis::Residual => "residual",
            AblationAxis::Mix => "mix",
            AblationAxis::Window => "window",
            AblationAxis::Fraction => "fraction",
        })
    }
}

/// Raw splits for experiments that rebuild graphs per setting.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub train: &'a [CodeSample],
    pub valid: &'a [CodeSample],
    pub test: Option<&'a [CodeSample]>,
    pub vocab: &'a Vocabulary,
    /// Replaces the random embedding table when present (`vocab x hidden`).
    pub embedding: Option<&'a Matrix>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub train_size: usize,
    /// Test accuracy of the selected checkpoint, when a test split exists.
    pub test_acc: Option<f64>,
}

/// Prepares graphs for `config`, trains, and scores the selected checkpoint
/// on the test split.
pub fn run_experiment(data: &ExperimentData<'_>, config: &TrainConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let (train_g, _) = prepare_graphs(data.train, data.vocab, config)?;
    let (valid_g, _) = prepare_graphs(data.valid, data.vocab, config)?;
    let mut init = init_params(config, data.vocab.len());
    if let Some(e) = data.embedding {
        if e.shape() != init.embedding.shape() {
            return Err(Error::shape(
                "run_experiment",
                format!(
                    "embedding {:?}, model expects {:?}",
                    e.shape(),
                    init.embedding.shape()
                ),
            ));
        }
        init.embedding = e.clone();
    }
    let outcome = train(&train_g, &valid_g, config, init)?;
    let test_acc = match data.test {
        Some(test) => {
            let (test_g, _) = prepare_graphs(test, data.vocab, config)?;
            Some(evaluate(&outcome.best, &config.architecture(), &test_g)?.accuracy)
        }
        None => None,
    };
    Ok(ExperimentResult {
        outcome,
        train_size: train_g.len(),
        test_acc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub train_size: usize,
    pub best_epoch: Option<usize>,
    pub valid_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Settings visited along `axis`, as `(label, config)` pairs.
pub fn ablation_settings(
    base: &TrainConfig,
    axis: AblationAxis,
) -> Vec<(String, TrainConfig, f64)> {
    match axis {
        AblationAxis::Residual => [true, false]
            .into_iter()
            .map(|r| {
                let label = if r { "on" } else { "off" };
                (
                    label.to_owned(),
                    TrainConfig {
                        residual: r,
                        ..base.clone()
                    },
                    1.0,
                )
            })
            .collect(),
        AblationAxis::Mix => Mix::ALL
            .into_iter()
            .map(|m| {
                (
                    m.to_string(),
                    TrainConfig {
                        mix: m,
                        ..base.clone()
                    },
                    1.0,
                )
            })
            .collect(),
        AblationAxis::Window => AblationAxis::WINDOWS
            .into_iter()
            .map(|w| {
                (
                    w.to_string(),
                    TrainConfig {
                        window: w,
                        ..base.clone()
                    },
                    1.0,
                )
            })
            .collect(),
        AblationAxis::Fraction => AblationAxis::FRACTIONS
            .into_iter()
            .map(|f| (format!("{}%", (f * 100.0).round()), base.clone(), f))
            .collect(),
    }
}

/// Trains once per setting along `axis`. Training fractions subsample the
/// training split (seeded, label-stratified); validation and test splits are
/// never subsampled.
pub fn ablate(
    data: &ExperimentData<'_>,
    base: &TrainConfig,
    axis: AblationAxis,
) -> Result<Vec<AblationRow>> {
    let labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    let mut rows = Vec::new();
    for (value, config, fraction) in ablation_settings(base, axis) {
        let picked;
        let subset: Vec<CodeSample>;
        let train = if fraction < 1.0 {
            picked = stratified_subsample(&labels, fraction, config.seed)?;
            subset = picked.iter().map(|&i| data.train[i].clone()).collect();
            &subset[..]
        } else {
            data.train
        };
        let r = run_experiment(&ExperimentData { train, ..*data }, &config)?;
        rows.push(AblationRow {
            axis,
            value,
            train_size: train.len(),
            best_epoch: r.outcome.best_epoch,
            valid_acc: r.outcome.best_valid_acc,
            test_acc: r.test_acc,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("axis,value,train_size,best_epoch,valid_acc,test_acc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis,
            r.value,
            r.train_size,
            r.best_epoch.map_or(String::new(), |e| e.to_string()),
            opt(r.valid_acc),
            opt(r.test_acc)
        ));
    }
    s
}

/// Construction label used in reports.
pub fn describe(config: &TrainConfig) -> String {
    let c = match config.construction {
        Construction::Unique => "UniT",
        Construction::Index => "Idx",
    };
    format!(
        "{}+{}{} lr={} ws={} MIX={} hs={}",
        config.base.to_string().to_uppercase(),
        c,
        if config.residual { "+res" } else { "" },
        config.lr,
        config.window,
        config.mix,
        config.hidden
    )
}
