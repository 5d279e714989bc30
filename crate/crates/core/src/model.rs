//! Full network: embedding lookup, GNN stack, readout and classifier.

use rand::Rng;

use crate::config::Architecture;
use crate::error::{Error, Result};
use crate::gnn::{glorot_scale, stack_on_tape, LayerParams, LayerVars};
use crate::graph::{normalize_adjacency, CodeGraph};
use crate::numeric::{softmax_rows, Matrix, Tape, Var};
use crate::readout::{
    logits_on, mix_pool_on, node_scores_on, ClassifierParams, ClassifierVars, ReadoutParams,
    ReadoutVars,
};

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `vocab x d`; row `i` is the feature vector of token id `i`.
    pub embedding: Matrix,
    /// One entry per distinct layer (a single entry when GGNN weights are shared).
    pub layers: Vec<LayerParams>,
    pub readout: ReadoutParams,
    pub classifier: ClassifierParams,
}

/// Uniform bound used for freshly initialised embedding rows.
pub fn embedding_scale(d: usize) -> f64 {
    glorot_scale(d, d)
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, vocab_size: usize, rng: &mut R) -> Self {
        let d = arch.hidden;
        let embedding = Matrix::uniform(vocab_size, d, embedding_scale(d), rng);
        let layers = (0..arch.distinct_layers())
            .map(|_| LayerParams::init(arch.base, d, rng))
            .collect();
        let readout = ReadoutParams::init(d, rng);
        let classifier = ClassifierParams::init(arch.mix.embedding_dim(d), rng);
        ModelParams {
            embedding,
            layers,
            readout,
            classifier,
        }
    }

    /// All-zero parameters of the right shapes; predicts `[0.5, 0.5]`.
    pub fn zeros(arch: &Architecture, vocab_size: usize) -> Self {
        let d = arch.hidden;
        ModelParams {
            embedding: Matrix::zeros(vocab_size, d),
            layers: (0..arch.distinct_layers())
                .map(|_| LayerParams::zeros(arch.base, d))
                .collect(),
            readout: ReadoutParams::zeros(d),
            classifier: ClassifierParams::zeros(arch.mix.embedding_dim(d)),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_owned(), &self.embedding)];
        for (k, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("gnn.{k}.{name}"), t));
            }
        }
        for (name, t) in self.readout.tensors() {
            out.push((format!("readout.{name}"), t));
        }
        for (name, t) in self.classifier.tensors() {
            out.push((format!("classifier.{name}"), t));
        }
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend(self.readout.tensors_mut());
        out.extend(self.classifier.tensors_mut());
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor against the architecture.
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        let d = arch.hidden;
        if self.embedding.cols() != d {
            return Err(Error::shape(
                "model",
                format!("embedding width {} != hidden {d}", self.embedding.cols()),
            ));
        }
        if self.layers.len() != arch.distinct_layers() {
            return Err(Error::shape(
                "model",
                format!(
                    "{} layer parameter sets, expected {}",
                    self.layers.len(),
                    arch.distinct_layers()
                ),
            ));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.kind() != arch.base {
                return Err(Error::InvalidArgument(format!(
                    "layer {k} is {}, architecture is {}",
                    l.kind(),
                    arch.base
                )));
            }
            for (name, t) in l.tensors() {
                if t.shape() != (d, d) {
                    return Err(Error::shape(
                        "model",
                        format!("gnn.{k}.{name} is {:?}, expected {d}x{d}", t.shape()),
                    ));
                }
            }
        }
        self.readout.validate()?;
        if self.readout.hidden_size() != d {
            return Err(Error::shape("model", "readout hidden size"));
        }
        self.classifier.validate()?;
        let dg = arch.mix.embedding_dim(d);
        if self.classifier.embedding_dim() != dg {
            return Err(Error::shape(
                "model",
                format!(
                    "classifier takes {} inputs, {} embedding has {dg}",
                    self.classifier.embedding_dim(),
                    arch.mix
                ),
            ));
        }
        Ok(())
    }

    /// Records every tensor as a tape leaf.
    pub fn register(&self, tape: &mut Tape, arch: &Architecture) -> ModelVars {
        let mut leaves = Vec::new();
        let embedding = tape.leaf(self.embedding.clone());
        leaves.push(embedding);
        let distinct: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|l| l.register(tape, &mut leaves))
            .collect();
        let layers = (0..arch.layers)
            .map(|k| distinct[k.min(distinct.len() - 1)])
            .collect();
        let readout = self.readout.register(tape, &mut leaves);
        let classifier = self.classifier.register(tape, &mut leaves);
        ModelVars {
            embedding,
            layers,
            readout,
            classifier,
            leaves,
        }
    }
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embedding: Var,
    layers: Vec<LayerVars>,
    readout: ReadoutVars,
    classifier: ClassifierVars,
    /// Leaves in [`ModelParams::tensors`] order.
    pub leaves: Vec<Var>,
}

/// A graph ready for the network: node token ids, normalised adjacency and
/// the sample's label and id.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub idx: i64,
    pub label: usize,
    pub node_token_ids: Vec<usize>,
    pub adjacency: Matrix,
}

impl GraphInput {
    pub fn from_graph(graph: &CodeGraph, idx: i64, label: usize) -> Self {
        GraphInput {
            idx,
            label,
            node_token_ids: graph.node_token_ids().to_vec(),
            adjacency: normalize_adjacency(graph),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_token_ids.len()
    }
}

/// Graph embedding `e_g` (`1 x d_g`) on the tape.
pub fn graph_embedding_on(
    tape: &mut Tape,
    vars: &ModelVars,
    arch: &Architecture,
    input: &GraphInput,
) -> Result<Var> {
    if input.node_token_ids.is_empty() {
        return Err(Error::NoTokens);
    }
    let x = tape.gather_rows(vars.embedding, &input.node_token_ids)?;
    let adj = tape.leaf(input.adjacency.clone());
    let h = stack_on_tape(tape, x, adj, &vars.layers, arch.residual)?;
    let scores = node_scores_on(tape, h, &vars.readout)?;
    mix_pool_on(tape, scores, arch.mix)
}

/// `1 x 2` logits on the tape.
pub fn logits_for(
    tape: &mut Tape,
    vars: &ModelVars,
    arch: &Architecture,
    input: &GraphInput,
) -> Result<Var> {
    let e = graph_embedding_on(tape, vars, arch, input)?;
    logits_on(tape, e, &vars.classifier)
}

/// Cross-entropy summed over `batch` and divided by `denominator`.
pub fn cross_entropy_on(
    tape: &mut Tape,
    vars: &ModelVars,
    arch: &Architecture,
    batch: &[&GraphInput],
    denominator: usize,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(batch.len());
    for g in batch {
        rows.push(logits_for(tape, vars, arch, g)?);
    }
    let logits = tape.concat_rows(&rows)?;
    let labels: Vec<usize> = batch.iter().map(|g| g.label).collect();
    let mean = tape.softmax_cross_entropy(logits, &labels)?;
    Ok(tape.affine(mean, batch.len() as f64 / denominator as f64, 0.0))
}

/// `lambda * sum of squares` over the given leaves.
pub fn l2_on(tape: &mut Tape, leaves: &[Var], lambda: f64) -> Result<Option<Var>> {
    if lambda == 0.0 || leaves.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for &v in leaves {
        let sq = tape.sum_squares(v);
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.map(|t| tape.affine(t, lambda, 0.0)))
}

/// Class probabilities `[p_benign, p_vulnerable]` for one graph.
pub fn predict_proba(
    params: &ModelParams,
    arch: &Architecture,
    input: &GraphInput,
) -> Result<[f64; 2]> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, arch);
    let z = logits_for(&mut tape, &vars, arch, input)?;
    let p = softmax_rows(tape.value(z));
    Ok([p.get(0, 0), p.get(0, 1)])
}

/// Graph embedding for one graph, outside of training.
pub fn graph_embedding(
    params: &ModelParams,
    arch: &Architecture,
    input: &GraphInput,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, arch);
    let e = graph_embedding_on(&mut tape, &vars, arch, input)?;
    Ok(tape.value(e).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::GnnKind;
    use crate::graph::build_unique_token_graph;
    use crate::readout::Mix;
    use crate::tokenizer::TokenSequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(base: GnnKind, mix: Mix) -> Architecture {
        Architecture {
            base,
            layers: 2,
            hidden: 4,
            mix,
            residual: true,
            share_ggnn_params: false,
        }
    }

    #[test]
    fn tensor_order_matches_mut_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = arch(GnnKind::Ggnn, Mix::Concat);
        let mut p = ModelParams::init(&a, 7, &mut rng);
        let shapes: Vec<_> = p.tensors().iter().map(|(_, t)| t.shape()).collect();
        let shapes_mut: Vec<_> = p.tensors_mut().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(p.tensors().len(), 1 + 2 * 6 + 4 + 2);
        assert_eq!(p.classifier.weight.shape(), (2, 8));
        p.validate(&a).unwrap();
        assert!(p.validate(&arch(GnnKind::Ggnn, Mix::Sum)).is_err());
        assert!(p.validate(&arch(GnnKind::Gcn, Mix::Concat)).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let a = arch(GnnKind::Gcn, Mix::Mul);
        let p = ModelParams::zeros(&a, 5);
        let seq = TokenSequence::new(vec![2, 3, 4, 2]).unwrap();
        let g = build_unique_token_graph(&seq, 3).unwrap();
        let probs = predict_proba(&p, &a, &GraphInput::from_graph(&g, 0, 1)).unwrap();
        assert_eq!(probs, [0.5, 0.5]);
    }

    #[test]
    fn shared_ggnn_reuses_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Architecture {
            share_ggnn_params: true,
            ..arch(GnnKind::Ggnn, Mix::Sum)
        };
        let p = ModelParams::init(&a, 5, &mut rng);
        assert_eq!(p.layers.len(), 1);
        let unshared = Architecture {
            share_ggnn_params: false,
            ..a
        };
        let p2 = ModelParams {
            layers: vec![p.layers[0].clone(), p.layers[0].clone()],
            ..p.clone()
        };
        let seq = TokenSequence::new(vec![2, 3, 4]).unwrap();
        let g = GraphInput::from_graph(&build_unique_token_graph(&seq, 2).unwrap(), 0, 0);
        let x = predict_proba(&p, &a, &g).unwrap();
        let y = predict_proba(&p2, &unshared, &g).unwrap();
        assert_eq!(x, y);
    }
}
