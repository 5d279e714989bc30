//! Graph-level readout: gated node scores, sum and max pooling, the MIX
//! combination, and the two-way softmax classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::glorot_scale;
use crate::numeric::{softmax_rows, Matrix, Tape, Var};

/// How the sum-pooled and max-pooled vectors are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mix {
    Sum,
    Mul,
    Concat,
}

impl Mix {
    pub const ALL: [Mix; 3] = [Mix::Sum, Mix::Mul, Mix::Concat];

    /// Width of the graph embedding for hidden size `d`.
    pub fn embedding_dim(self, d: usize) -> usize {
        match self {
            Mix::Sum | Mix::Mul => d,
            Mix::Concat => 2 * d,
        }
    }
}

impl std::str::FromStr for Mix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SUM" => Ok(Mix::Sum),
            "MUL" => Ok(Mix::Mul),
            "CONCAT" => Ok(Mix::Concat),
            _ => Err(Error::InvalidArgument(format!("unknown MIX {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mix::Sum => "SUM",
            Mix::Mul => "MUL",
            Mix::Concat => "CONCAT",
        })
    }
}

/// Soft-attention gate (`gate_w`, `gate_b`) and feature transform
/// (`transform_w`, `transform_b`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    /// `d x 1`
    pub gate_w: Matrix,
    /// `1 x 1`
    pub gate_b: Matrix,
    /// `d x d`
    pub transform_w: Matrix,
    /// `1 x d`
    pub transform_b: Matrix,
}

impl ReadoutParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        ReadoutParams {
            gate_w: Matrix::uniform(d, 1, glorot_scale(d, 1), rng),
            gate_b: Matrix::zeros(1, 1),
            transform_w: Matrix::uniform(d, d, glorot_scale(d, d), rng),
            transform_b: Matrix::zeros(1, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        ReadoutParams {
            gate_w: Matrix::zeros(d, 1),
            gate_b: Matrix::zeros(1, 1),
            transform_w: Matrix::zeros(d, d),
            transform_b: Matrix::zeros(1, d),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.transform_w.rows()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("gate_w", &self.gate_w),
            ("gate_b", &self.gate_b),
            ("transform_w", &self.transform_w),
            ("transform_b", &self.transform_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.gate_w,
            &mut self.gate_b,
            &mut self.transform_w,
            &mut self.transform_b,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_size();
        let want = [(d, 1), (1, 1), (d, d), (1, d)];
        for ((name, t), shape) in self.tensors().into_iter().zip(want) {
            if t.shape() != shape {
                return Err(Error::shape(
                    "readout",
                    format!("{name} is {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, leaves: &mut Vec<Var>) -> ReadoutVars {
        let gate_w = tape.leaf(self.gate_w.clone());
        let gate_b = tape.leaf(self.gate_b.clone());
        let transform_w = tape.leaf(self.transform_w.clone());
        let transform_b = tape.leaf(self.transform_b.clone());
        leaves.extend([gate_w, gate_b, transform_w, transform_b]);
        ReadoutVars {
            gate_w,
            gate_b,
            transform_w_t: tape.transpose(transform_w),
            transform_b,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReadoutVars {
    gate_w: Var,
    gate_b: Var,
    transform_w_t: Var,
    transform_b: Var,
}

/// Final linear layer producing two logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `2 x d_g`
    pub weight: Matrix,
    /// `1 x 2`
    pub bias: Matrix,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(embedding_dim: usize, rng: &mut R) -> Self {
        ClassifierParams {
            weight: Matrix::uniform(2, embedding_dim, glorot_scale(embedding_dim, 2), rng),
            bias: Matrix::zeros(1, 2),
        }
    }

    pub fn zeros(embedding_dim: usize) -> Self {
        ClassifierParams {
            weight: Matrix::zeros(2, embedding_dim),
            bias: Matrix::zeros(1, 2),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.rows() != 2 || self.bias.shape() != (1, 2) {
            return Err(Error::shape(
                "classifier",
                format!(
                    "weight {:?}, bias {:?}; expected 2 x d_g and 1 x 2",
                    self.weight.shape(),
                    self.bias.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, leaves: &mut Vec<Var>) -> ClassifierVars {
        let weight = tape.leaf(self.weight.clone());
        let bias = tape.leaf(self.bias.clone());
        leaves.extend([weight, bias]);
        ClassifierVars {
            weight_t: tape.transpose(weight),
            bias,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    weight_t: Var,
    bias: Var,
}

/// `e_v = sigmoid(w^T h_v + b) * ReLU(W h_v + b_vec)` for every row of `h`.
pub fn node_scores_on(tape: &mut Tape, h: Var, p: &ReadoutVars) -> Result<Var> {
    let gate_pre = tape.matmul(h, p.gate_w)?;
    let gate_pre = tape.add_row(gate_pre, p.gate_b)?;
    let gate = tape.sigmoid(gate_pre);
    let lin = tape.matmul(h, p.transform_w_t)?;
    let lin = tape.add_row(lin, p.transform_b)?;
    let feat = tape.relu(lin);
    tape.mul_col(feat, gate)
}

/// Combines the column-wise sum and max of `scores` into a `1 x d_g` row.
pub fn mix_pool_on(tape: &mut Tape, scores: Var, mix: Mix) -> Result<Var> {
    if tape.value(scores).rows() == 0 {
        return Err(Error::InvalidArgument(
            "cannot pool an empty node set".into(),
        ));
    }
    let s = tape.sum_over_rows(scores)?;
    let x = tape.max_over_rows(scores)?;
    match mix {
        Mix::Sum => tape.add(s, x),
        Mix::Mul => tape.mul(s, x),
        Mix::Concat => tape.concat_cols(s, x),
    }
}

/// `W1 e_g + b1` as a `1 x 2` row of logits.
pub fn logits_on(tape: &mut Tape, embedding: Var, p: &ClassifierVars) -> Result<Var> {
    let z = tape.matmul(embedding, p.weight_t)?;
    tape.add_row(z, p.bias)
}

pub fn node_scores(h: &Matrix, p: &ReadoutParams) -> Result<Matrix> {
    p.validate()?;
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let vars = p.register(&mut tape, &mut Vec::new());
    let out = node_scores_on(&mut tape, hv, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn mix_pool(scores: &Matrix, mix: Mix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let out = mix_pool_on(&mut tape, s, mix)?;
    Ok(tape.value(out).clone())
}

/// Class probabilities `[p_benign, p_vulnerable]`.
pub fn classify(embedding: &Matrix, p: &ClassifierParams) -> Result<[f64; 2]> {
    p.validate()?;
    if embedding.shape() != (1, p.embedding_dim()) {
        return Err(Error::shape(
            "classify",
            format!(
                "embedding {:?}, classifier expects 1x{}",
                embedding.shape(),
                p.embedding_dim()
            ),
        ));
    }
    let mut tape = Tape::new();
    let e = tape.leaf(embedding.clone());
    let vars = p.register(&mut tape, &mut Vec::new());
    let z = logits_on(&mut tape, e, &vars)?;
    let probs = softmax_rows(tape.value(z));
    Ok([probs.get(0, 0), probs.get(0, 1)])
}
