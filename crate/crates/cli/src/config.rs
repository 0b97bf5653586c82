//! Run configuration: one TOML document, overridden by flags.

use std::fs;
use std::path::Path;

use ndcr::data::GenConfig;
use ndcr::{Ablation, LossConfig, ModelConfig, OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Layout of the config file. Every section is optional.
///
/// ```toml
/// [gen]
/// d = 64
/// count_weights = [61, 863, 1239, 126, 16]
///
/// [optimizer]
/// lr = 6e-5
///
/// [model]
/// ffn_mult = 2
///
/// [loss]
/// theta = 0.2
///
/// ablation = "full"
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            model: self.model.clone(),
            loss: self.loss.clone(),
            ablation: self.ablation,
        }
    }
}

/// Parse a comma-separated weight list.
pub fn parse_weights(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad weight {w:?}: {e}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_are_optional() {
        let c: RunConfig = toml::from_str("[optimizer]\nlr = 0.001\n").unwrap();
        assert_eq!(c.optimizer.lr, 0.001);
        assert_eq!(c.optimizer.batch_size, 36);
        assert_eq!(c.gen, GenConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[optimiser]\nlr = 1.0\n").is_err());
    }

    #[test]
    fn weights() {
        assert_eq!(parse_weights("1, 2,3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(parse_weights("1,x").is_err());
    }
}
