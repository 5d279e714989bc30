//! Graph neural network vulnerability detection for C/C++ functions.
//!
//! Source text is tokenized, turned into a token co-occurrence graph, run
//! through a residual GCN or GGNN stack, pooled into a graph embedding with
//! a gated sum/max mix, and classified as vulnerable or benign.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod readout;
pub mod tokenizer;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Architecture, TrainConfig};
pub use error::{Error, Result};
pub use gnn::GnnKind;
pub use graph::{build_graph, CodeGraph, Construction};
pub use model::{GraphInput, ModelParams};
pub use numeric::Matrix;
pub use readout::Mix;
pub use tokenizer::{tokenize, Vocabulary};
