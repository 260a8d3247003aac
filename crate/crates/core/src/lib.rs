//! Dual-branch masked modeling: an image (ventral) and a video (dorsal)
//! masked autoencoder whose encoders are read out at intermediate blocks,
//! each readout reconstructing its own target (Gabor texture, contour,
//! pixels, motion), trained jointly with partially shared weights.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod patching;
pub mod model;
pub mod targets;
pub mod training;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Which of the two branches a model, target set or batch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// Still images.
    Ventral,
    /// Clips.
    Dorsal,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Ventral => "ventral",
            BranchKind::Dorsal => "dorsal",
        }
    }
}
