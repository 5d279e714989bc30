//! Training configuration resolution: built-in defaults, then an optional
//! TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use vulngraph::{Construction, GnnKind, Mix, TrainConfig};

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with training settings; flags take precedence
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// GNN layer type
    #[arg(long, value_name = "gcn|ggnn")]
    pub base: Option<GnnKind>,

    /// Graph construction
    #[arg(long, value_name = "unique|index")]
    pub construction: Option<Construction>,

    /// How sum and max pooling are combined
    #[arg(long, value_name = "SUM|MUL|CONCAT")]
    pub mix: Option<Mix>,

    /// Hidden size
    #[arg(long = "hs", value_name = "N")]
    pub hidden: Option<usize>,

    /// Sliding window size
    #[arg(long = "ws", value_name = "N")]
    pub window: Option<usize>,

    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,

    /// Weight of the squared L2 penalty
    #[arg(long, value_name = "WEIGHT")]
    pub lambda: Option<f64>,

    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,

    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,

    /// Number of GNN layers
    #[arg(long, value_name = "N")]
    pub layers: Option<usize>,

    /// Root random seed
    #[arg(long, env = "REGVD_SEED", value_name = "N")]
    pub seed: Option<u64>,

    /// Add each layer's input to its output
    #[arg(long, overrides_with = "no_residual")]
    pub residual: bool,

    #[arg(long, overrides_with = "residual")]
    pub no_residual: bool,

    /// Keep the embedding table fixed during training
    #[arg(long)]
    pub freeze_embeddings: bool,

    /// Use one set of GGNN weights for every layer
    #[arg(long)]
    pub share_ggnn_params: bool,

    /// Input functions are already whitespace-separated tokens
    #[arg(long)]
    pub pretokenized: bool,

    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,

    /// Minimum token frequency for a vocabulary entry
    #[arg(long, value_name = "N")]
    pub min_count: Option<usize>,

    /// Parallel gradient workers; 1 is bit-reproducible
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => load_toml(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        set!(
            base,
            construction,
            mix,
            hidden,
            window,
            lr,
            lambda,
            batch,
            epochs,
            layers,
            seed
        );
        set!(max_len, min_count, workers);
        if self.residual {
            c.residual = true;
        }
        if self.no_residual {
            c.residual = false;
        }
        c.freeze_embeddings |= self.freeze_embeddings;
        c.share_ggnn_params |= self.share_ggnn_params;
        c.pretokenized |= self.pretokenized;
        c.validate()?;
        Ok(c)
    }
}

fn load_toml(path: &Path) -> Result<TrainConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Where initial node features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSource {
    Random,
    File(PathBuf),
}

impl std::str::FromStr for InitSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(InitSource::Random);
        }
        match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(InitSource::File(PathBuf::from(p))),
            _ => bail!("expected `random` or `file:<path>`, got {s:?}"),
        }
    }
}
