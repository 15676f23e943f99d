//! Joint detection and in-plane rotation estimation on a synthetic
//! oriented-glyph task: a small fp64 autodiff engine, the derotation layer
//! and rotation loss, a two-branch rotation-aware network with staged
//! training and hard negative mining, discriminative region proposals, a
//! deterministic scene generator, and the detection/rotation metric suite.

pub mod boxes;
pub mod checkpoint;
pub mod derotation;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod netarch;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod proposals;
pub mod synthdata;
pub mod tensor;

pub use boxes::{BBox, Detection, GroundTruth, Proposal};
pub use error::{CoreError, Result};
pub use tensor::Tensor;
