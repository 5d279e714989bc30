//! Graph convolution and gated graph layers with optional residual stacking.
//!
//! Node states are `m x d` matrices with one row per node. Weights are
//! stored as `d x d` maps applied to column vectors, so a layer computes
//! `H W^T` for the row layout. Layers carry no bias terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Gcn,
    Ggnn,
}

impl std::str::FromStr for GnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(GnnKind::Gcn),
            "ggnn" => Ok(GnnKind::Ggnn),
            _ => Err(Error::InvalidArgument(format!("unknown GNN base {s:?}"))),
        }
    }
}

impl std::fmt::Display for GnnKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GnnKind::Gcn => "gcn",
            GnnKind::Ggnn => "ggnn",
        })
    }
}

/// Glorot-style bound for a `d x d` map.
pub fn glorot_scale(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn square(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::shape(
            op,
            format!("weight must be square, got {:?}", m.shape()),
        ));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayerParams {
    pub weight: Matrix,
}

impl GcnLayerParams {
    pub fn new(weight: Matrix) -> Result<Self> {
        Ok(Self {
            weight: square("gcn", weight)?,
        })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            weight: Matrix::zeros(d, d),
        }
    }
}

/// Update (`z`), reset (`r`) and candidate (`o`) maps, each split into the
/// part applied to the neighbour aggregate (`w_*`) and to the node's own
/// state (`u_*`).
#[derive(Debug, Clone, PartialEq)]
pub struct GgnnLayerParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub w_o: Matrix,
    pub u_o: Matrix,
}

impl GgnnLayerParams {
    pub fn zeros(d: usize) -> Self {
        let z = Matrix::zeros(d, d);
        Self {
            w_z: z.clone(),
            u_z: z.clone(),
            w_r: z.clone(),
            u_r: z.clone(),
            w_o: z.clone(),
            u_o: z,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Gcn(GcnLayerParams),
    Ggnn(GgnnLayerParams),
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(kind: GnnKind, d: usize, rng: &mut R) -> Self {
        let s = glorot_scale(d, d);
        match kind {
            GnnKind::Gcn => LayerParams::Gcn(GcnLayerParams {
                weight: Matrix::uniform(d, d, s, rng),
            }),
            GnnKind::Ggnn => LayerParams::Ggnn(GgnnLayerParams {
                w_z: Matrix::uniform(d, d, s, rng),
                u_z: Matrix::uniform(d, d, s, rng),
                w_r: Matrix::uniform(d, d, s, rng),
                u_r: Matrix::uniform(d, d, s, rng),
                w_o: Matrix::uniform(d, d, s, rng),
                u_o: Matrix::uniform(d, d, s, rng),
            }),
        }
    }

    pub fn zeros(kind: GnnKind, d: usize) -> Self {
        match kind {
            GnnKind::Gcn => LayerParams::Gcn(GcnLayerParams::zeros(d)),
            GnnKind::Ggnn => LayerParams::Ggnn(GgnnLayerParams::zeros(d)),
        }
    }

    pub fn kind(&self) -> GnnKind {
        match self {
            LayerParams::Gcn(_) => GnnKind::Gcn,
            LayerParams::Ggnn(_) => GnnKind::Ggnn,
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            LayerParams::Gcn(p) => p.weight.rows(),
            LayerParams::Ggnn(p) => p.w_z.rows(),
        }
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            LayerParams::Gcn(p) => vec![("weight", &p.weight)],
            LayerParams::Ggnn(p) => vec![
                ("w_z", &p.w_z),
                ("u_z", &p.u_z),
                ("w_r", &p.w_r),
                ("u_r", &p.u_r),
                ("w_o", &p.w_o),
                ("u_o", &p.u_o),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            LayerParams::Gcn(p) => vec![&mut p.weight],
            LayerParams::Ggnn(p) => vec![
                &mut p.w_z, &mut p.u_z, &mut p.w_r, &mut p.u_r, &mut p.w_o, &mut p.u_o,
            ],
        }
    }

    fn validate(&self) -> Result<usize> {
        let d = self.hidden_size();
        for (name, t) in self.tensors() {
            if t.shape() != (d, d) {
                return Err(Error::shape(
                    "gnn layer",
                    format!("{name} is {:?}, expected {d}x{d}", t.shape()),
                ));
            }
        }
        Ok(d)
    }

    /// Records the layer's weights as leaves, pushing each leaf handle onto
    /// `leaves` in declaration order.
    pub fn register(&self, tape: &mut Tape, leaves: &mut Vec<Var>) -> LayerVars {
        let mut reg = |m: &Matrix| {
            let v = tape.leaf(m.clone());
            leaves.push(v);
            tape.transpose(v)
        };
        match self {
            LayerParams::Gcn(p) => LayerVars::Gcn {
                weight_t: reg(&p.weight),
            },
            LayerParams::Ggnn(p) => LayerVars::Ggnn {
                w_z_t: reg(&p.w_z),
                u_z_t: reg(&p.u_z),
                w_r_t: reg(&p.w_r),
                u_r_t: reg(&p.u_r),
                w_o_t: reg(&p.w_o),
                u_o_t: reg(&p.u_o),
            },
        }
    }
}

/// Transposed weight handles of one layer on a tape.
#[derive(Debug, Clone, Copy)]
pub enum LayerVars {
    Gcn {
        weight_t: Var,
    },
    Ggnn {
        w_z_t: Var,
        u_z_t: Var,
        w_r_t: Var,
        u_r_t: Var,
        w_o_t: Var,
        u_o_t: Var,
    },
}

impl LayerVars {
    pub fn kind(&self) -> GnnKind {
        match self {
            LayerVars::Gcn { .. } => GnnKind::Gcn,
            LayerVars::Ggnn { .. } => GnnKind::Ggnn,
        }
    }
}

/// `ReLU(A H W^T)`.
pub fn gcn_step(tape: &mut Tape, h: Var, adj: Var, weight_t: Var) -> Result<Var> {
    let agg = tape.matmul(adj, h)?;
    let lin = tape.matmul(agg, weight_t)?;
    Ok(tape.relu(lin))
}

/// One gated update: neighbour aggregate, sigmoid gates, tanh candidate,
/// and the convex blend of old state and candidate.
#[allow(clippy::too_many_arguments)]
pub fn ggnn_step(
    tape: &mut Tape,
    h: Var,
    adj: Var,
    w_z_t: Var,
    u_z_t: Var,
    w_r_t: Var,
    u_r_t: Var,
    w_o_t: Var,
    u_o_t: Var,
) -> Result<Var> {
    let a = tape.matmul(adj, h)?;

    let za = tape.matmul(a, w_z_t)?;
    let zh = tape.matmul(h, u_z_t)?;
    let zp = tape.add(za, zh)?;
    let z = tape.sigmoid(zp);

    let ra = tape.matmul(a, w_r_t)?;
    let rh = tape.matmul(h, u_r_t)?;
    let rp = tape.add(ra, rh)?;
    let r = tape.sigmoid(rp);

    let oa = tape.matmul(a, w_o_t)?;
    let rh = tape.mul(r, h)?;
    let oh = tape.matmul(rh, u_o_t)?;
    let op = tape.add(oa, oh)?;
    let cand = tape.tanh(op);

    let keep = tape.affine(z, -1.0, 1.0);
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

pub fn layer_step(tape: &mut Tape, h: Var, adj: Var, layer: &LayerVars) -> Result<Var> {
    match *layer {
        LayerVars::Gcn { weight_t } => gcn_step(tape, h, adj, weight_t),
        LayerVars::Ggnn {
            w_z_t,
            u_z_t,
            w_r_t,
            u_r_t,
            w_o_t,
            u_o_t,
        } => ggnn_step(tape, h, adj, w_z_t, u_z_t, w_r_t, u_r_t, w_o_t, u_o_t),
    }
}

/// Applies `layers` in order; with `residual`, each layer's output is added
/// to its input.
pub fn stack_on_tape(
    tape: &mut Tape,
    h0: Var,
    adj: Var,
    layers: &[LayerVars],
    residual: bool,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one GNN layer required".into(),
        ));
    }
    let mut h = h0;
    for layer in layers {
        let out = layer_step(tape, h, adj, layer)?;
        h = if residual { tape.add(h, out)? } else { out };
    }
    Ok(h)
}

fn check_inputs(h: &Matrix, adj: &Matrix, d: usize) -> Result<()> {
    if adj.rows() != adj.cols() || adj.rows() != h.rows() {
        return Err(Error::shape(
            "gnn",
            format!("adjacency {:?} for {} nodes", adj.shape(), h.rows()),
        ));
    }
    if h.cols() != d {
        return Err(Error::shape(
            "gnn",
            format!("node states have {} features, layer expects {d}", h.cols()),
        ));
    }
    Ok(())
}

/// Runs a stack of layers of one kind outside of training.
pub fn residual_stack(
    h0: &Matrix,
    adj: &Matrix,
    layers: &[LayerParams],
    kind: GnnKind,
    residual: bool,
) -> Result<Matrix> {
    let Some(first) = layers.first() else {
        return Err(Error::InvalidArgument(
            "at least one GNN layer required".into(),
        ));
    };
    let d = first.validate()?;
    for (k, layer) in layers.iter().enumerate() {
        if layer.kind() != kind {
            return Err(Error::InvalidArgument(format!(
                "layer {k} is {}, stack is {kind}",
                layer.kind()
            )));
        }
        if layer.validate()? != d {
            return Err(Error::shape(
                "residual_stack",
                format!("layer {k} hidden size {} != {d}", layer.hidden_size()),
            ));
        }
    }
    check_inputs(h0, adj, d)?;
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let h = tape.leaf(h0.clone());
    let a = tape.leaf(adj.clone());
    let vars: Vec<LayerVars> = layers
        .iter()
        .map(|l| l.register(&mut tape, &mut leaves))
        .collect();
    let out = stack_on_tape(&mut tape, h, a, &vars, residual)?;
    Ok(tape.value(out).clone())
}

pub fn gcn_layer(h: &Matrix, adj: &Matrix, p: &GcnLayerParams) -> Result<Matrix> {
    residual_stack(h, adj, &[LayerParams::Gcn(p.clone())], GnnKind::Gcn, false)
}

pub fn ggnn_layer(h: &Matrix, adj: &Matrix, p: &GgnnLayerParams) -> Result<Matrix> {
    residual_stack(
        h,
        adj,
        &[LayerParams::Ggnn(p.clone())],
        GnnKind::Ggnn,
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edge2() -> Matrix {
        Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    #[test]
    fn gcn_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let LayerParams::Gcn(p) = LayerParams::init(GnnKind::Gcn, 3, &mut rng) else {
            unreachable!()
        };
        let out = gcn_layer(&Matrix::zeros(2, 3), &edge2(), &p).unwrap();
        assert_eq!(out, Matrix::zeros(2, 3));
    }

    #[test]
    fn gcn_isolated_node_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let LayerParams::Gcn(p) = LayerParams::init(GnnKind::Gcn, 3, &mut rng) else {
            unreachable!()
        };
        let mut adj = Matrix::zeros(3, 3);
        adj.set(0, 1, 1.0);
        adj.set(1, 0, 1.0);
        let h = Matrix::uniform(3, 3, 1.0, &mut rng);
        let out = gcn_layer(&h, &adj, &p).unwrap();
        assert_eq!(out.row(2), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn gcn_identity_swaps_neighbours() {
        let p = GcnLayerParams::new(Matrix::identity(2)).unwrap();
        let h = Matrix::from_rows(&[vec![1.0, -2.0], vec![-3.0, 4.0]]).unwrap();
        let out = gcn_layer(&h, &edge2(), &p).unwrap();
        assert_eq!(out.data(), [0.0, 4.0, 1.0, 0.0]);
    }

    #[test]
    fn ggnn_closed_gate_keeps_state() {
        let d = 2;
        let mut p = GgnnLayerParams::zeros(d);
        // U_z = -1e3 * I drives z to zero for inputs with positive entries
        p.u_z = Matrix::identity(d).map(|x| -1e3 * x);
        p.w_o = Matrix::identity(d);
        let h = Matrix::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.25]]).unwrap();
        let out = ggnn_layer(&h, &edge2(), &p).unwrap();
        assert!(out.max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn ggnn_isolated_node_uses_own_state() {
        // a_v = 0 leaves z = sigmoid(U_z h), r = sigmoid(U_r h),
        // cand = tanh(U_o (r * h))
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let LayerParams::Ggnn(p) = LayerParams::init(GnnKind::Ggnn, 3, &mut rng) else {
            unreachable!()
        };
        let h = Matrix::uniform(1, 3, 1.0, &mut rng);
        let out = ggnn_layer(&h, &Matrix::zeros(1, 1), &p).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mv = |w: &Matrix, x: &[f64]| -> Vec<f64> {
            (0..3)
                .map(|i| (0..3).map(|j| w.get(i, j) * x[j]).sum())
                .collect()
        };
        let hv = h.row(0);
        let z: Vec<f64> = mv(&p.u_z, hv).into_iter().map(sig).collect();
        let r: Vec<f64> = mv(&p.u_r, hv).into_iter().map(sig).collect();
        let rh: Vec<f64> = r.iter().zip(hv).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = mv(&p.u_o, &rh).into_iter().map(f64::tanh).collect();
        for i in 0..3 {
            let want = (1.0 - z[i]) * hv[i] + z[i] * cand[i];
            assert!((out.get(0, i) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ggnn_zero_everything() {
        let out = ggnn_layer(&Matrix::zeros(2, 3), &edge2(), &GgnnLayerParams::zeros(3)).unwrap();
        assert_eq!(out, Matrix::zeros(2, 3));
    }

    #[test]
    fn residual_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h0 = Matrix::uniform(2, 4, 1.0, &mut rng);
        let layers = vec![LayerParams::zeros(GnnKind::Gcn, 4); 2];
        let out = residual_stack(&h0, &edge2(), &layers, GnnKind::Gcn, true).unwrap();
        assert_eq!(out, h0);
        let out = residual_stack(&h0, &edge2(), &layers, GnnKind::Gcn, false).unwrap();
        assert_eq!(out, Matrix::zeros(2, 4));
    }

    #[test]
    fn residual_ggnn_saturated_gate_with_zero_candidate() {
        // z -> 1 and cand = 0 give h + [(1 - z) h + z * 0] -> h
        let d = 2;
        let mut p = GgnnLayerParams::zeros(d);
        p.u_z = Matrix::identity(d).map(|x| 1e3 * x);
        let h = Matrix::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.25]]).unwrap();
        let out =
            residual_stack(&h, &edge2(), &[LayerParams::Ggnn(p)], GnnKind::Ggnn, true).unwrap();
        assert!(out.max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn stack_errors() {
        let h = Matrix::zeros(2, 3);
        assert!(residual_stack(&h, &edge2(), &[], GnnKind::Gcn, true).is_err());
        let mixed = vec![
            LayerParams::zeros(GnnKind::Gcn, 3),
            LayerParams::zeros(GnnKind::Gcn, 4),
        ];
        assert!(residual_stack(&h, &edge2(), &mixed, GnnKind::Gcn, true).is_err());
        let kinds = vec![LayerParams::zeros(GnnKind::Ggnn, 3)];
        assert!(residual_stack(&h, &edge2(), &kinds, GnnKind::Gcn, true).is_err());
        let one = vec![LayerParams::zeros(GnnKind::Gcn, 3)];
        assert!(residual_stack(&h, &Matrix::zeros(3, 3), &one, GnnKind::Gcn, true).is_err());
        assert!(GcnLayerParams::new(Matrix::zeros(2, 3)).is_err());
    }
}
