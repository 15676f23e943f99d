use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use derotnet_core::netarch::NetworkConfig;
use derotnet_core::pipeline::TrainConfig;
use derotnet_core::proposals::ProposalConfig;
use derotnet_core::synthdata::SceneConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Detection probability above which a window becomes a hard negative.
    pub threshold: f64,
    pub rounds: usize,
    /// Detection-branch epochs run after each mining round. Only the
    /// detection branch is retrained: mining exists to sharpen the decision
    /// boundary against the new negatives, and moving the shared stack or
    /// rotation branch at this point degrades both branches.
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            threshold: 0.4,
            rounds: 2,
            retrain_epochs: 2,
            retrain_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IOU threshold for detection matching.
    pub iou: f64,
    /// Overlap threshold for non-maximum suppression of final detections;
    /// unset disables NMS. Proposals are never suppressed.
    pub nms: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou: 0.5,
            nms: Some(0.5),
        }
    }
}

/// The whole run in one document. Unknown keys are rejected so that typos
/// fail loudly instead of silently using a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset size for `synth`.
    pub images: usize,
    pub scene: SceneConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub proposals: ProposalConfig,
    pub mining: MiningConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            images: 100,
            scene: SceneConfig::default(),
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            proposals: ProposalConfig::default(),
            mining: MiningConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<RunConfig, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::data(format!("reading {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::usage(format!("bad config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        // the scene generator owns its own seed stream
        config.scene.seed = config.seed;
        Ok(config)
    }

    /// Canonical serialized form; written next to every run's outputs.
    pub fn resolved_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::data(format!("serializing config: {e}")))
    }

    /// Hash of the resolved document, embedded in every artifact.
    pub fn hash(&self) -> Result<String, CliError> {
        let text = self.resolved_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(hex(&digest[..16]))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
