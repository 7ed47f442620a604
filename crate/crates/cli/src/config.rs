//! Run configuration: one JSON file with a section per typed config.

use std::path::Path;

use radiofield3d::ablation::LossVariant;
use radiofield3d::eval::EvalConfig;
use radiofield3d::model::ModelConfig;
use radiofield3d::synth::SceneConfig;
use radiofield3d::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub strategies: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
    /// Train one model per count instead of evaluating a single model at every count.
    pub retrain: bool,
    pub variants: Vec<LossVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            strategies: vec![vec![0, 4, 7], vec![3, 4, 5], vec![3], vec![0, 2, 4, 5, 7]],
            counts: vec![5, 10, 25, 50, 100, 200],
            retrain: false,
            variants: LossVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

/// Parses `0,4,7`.
fn parse_layers(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad layer index {t:?} in {s:?}")))
        .collect()
}

/// Parses `0,4,7;3,4,5`.
pub fn parse_strategies(s: &str) -> Result<Vec<Vec<usize>>, String> {
    s.split(';').map(parse_layers).collect()
}
