//! The four-part rotation-aware model: a shared conv stack, a rotation
//! branch regressing raw (c, s), the derotation layer, and a detection
//! branch doing binary classification on the derotated features. Also the
//! staged training schema, batch balancing, augmentation and hard negative
//! mining.

mod model;
mod training;

pub use model::{ForwardOptions, ForwardResult, Model, NetworkConfig};
pub use training::{
    augment, flip_patch, mine_hard_negatives, rotate_patch, run_stage, sample_minibatch, wrap_deg,
    EpochLog, EpochSampler, SamplePool, Stage, StagePlan, StageSpec, TrainingSample,
};
