use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::GnnKind;
use crate::graph::Construction;
use crate::readout::Mix;
use crate::tokenizer::DEFAULT_MAX_LEN;

/// Hyperparameters for one training run. Defaults follow the best
/// GCN/unique-token setting: lr 5e-4, window 5, MUL, hidden 128, two
/// residual layers, batch 128, 100 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base: GnnKind,
    pub construction: Construction,
    pub mix: Mix,
    pub residual: bool,
    pub layers: usize,
    pub hidden: usize,
    pub window: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_len: usize,
    pub min_count: usize,
    pub share_ggnn_params: bool,
    pub freeze_embeddings: bool,
    pub pretokenized: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base: GnnKind::Gcn,
            construction: Construction::Unique,
            mix: Mix::Mul,
            residual: true,
            layers: 2,
            hidden: 128,
            window: 5,
            lr: 5e-4,
            lambda: 1e-5,
            batch: 128,
            epochs: 100,
            seed: 42,
            max_len: DEFAULT_MAX_LEN,
            min_count: 1,
            share_ggnn_params: false,
            freeze_embeddings: false,
            pretokenized: false,
            workers: 1,
        }
    }
}

/// The parts of a configuration that fix the network's shape and wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub base: GnnKind,
    pub layers: usize,
    pub hidden: usize,
    pub mix: Mix,
    pub residual: bool,
    pub share_ggnn_params: bool,
}

impl Architecture {
    /// Number of distinct layer parameter sets.
    pub fn distinct_layers(&self) -> usize {
        if self.base == GnnKind::Ggnn && self.share_ggnn_params {
            1
        } else {
            self.layers
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            base: self.base,
            layers: self.layers,
            hidden: self.hidden,
            mix: self.mix,
            residual: self.residual,
            share_ggnn_params: self.share_ggnn_params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("max_len", self.max_len),
            ("min_count", self.min_count),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.window < 2 {
            return Err(Error::InvalidArgument(format!(
                "window must be at least 2, got {}",
                self.window
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            TrainConfig {
                window: 1,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lambda: -1.0,
                ..Default::default()
            },
            TrainConfig {
                hidden: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn json_roundtrip_and_partial_input() {
        let c = TrainConfig {
            base: GnnKind::Ggnn,
            mix: Mix::Concat,
            ..Default::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"mix\":\"CONCAT\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"hidden": 64}"#).unwrap();
        assert_eq!(partial.hidden, 64);
        assert_eq!(partial.window, 5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"hidden_size": 64}"#).is_err());
    }

    #[test]
    fn shared_ggnn_has_one_parameter_set() {
        let c = TrainConfig {
            base: GnnKind::Ggnn,
            share_ggnn_params: true,
            layers: 3,
            ..Default::default()
        };
        assert_eq!(c.architecture().distinct_layers(), 1);
        let c = TrainConfig {
            share_ggnn_params: true,
            ..Default::default()
        };
        assert_eq!(c.architecture().distinct_layers(), 2);
    }
}
