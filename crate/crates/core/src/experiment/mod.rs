//! End-to-end runs driven by one JSON configuration: ventral pretraining,
//! joint pretraining, finetuning, reconstruction, gradient checks and
//! ablation sweeps.

mod ablation;
mod gradcheck;
mod recon;

pub use ablation::{ablation_csv, ablation_markdown, parse_axis_value, run_ablation, AblationAxis, AblationRow};
pub use gradcheck::{gradcheck_joint, GradcheckConfig, GradcheckReport};
pub use recon::{reconstruct_images, reconstruction_grid};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic_motion_dataset, gen_synthetic_shapes_dataset, ClipDataset, ImageDataset,
    ImageSpec, MotionSpec,
};
use crate::error::{config_err, Result};
use crate::model::{init_encoder, Branch, InputShape, ModelConfig, SharedBlocks};
use crate::numerics::{ParamStore, Tensor};
use crate::patching::{Clip, ClipSpec};
use crate::targets::{build_gabor_bank, BranchInput, GaborKernel, TargetConfig};
use crate::training::{
    finetune, pretrain_joint, pretrain_ventral, setup_dorsal, tokenize, EpochReport,
    FinetuneConfig, FinetuneReport, LabeledTokens, LossReport, TargetBuilder, TrainConfig,
};
use crate::BranchKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Synthetic shape images for ventral pretraining.
    pub shapes: usize,
    /// Synthetic motion clips for joint pretraining.
    pub motion: usize,
    pub finetune_train: usize,
    pub finetune_test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shapes: 2000,
            motion: 400,
            finetune_train: 320,
            finetune_test: 80,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub targets: TargetConfig,
    pub image: ImageSpec,
    pub motion: MotionSpec,
    pub ventral: TrainConfig,
    pub joint: TrainConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            targets: TargetConfig::default(),
            image: ImageSpec::default(),
            motion: MotionSpec::default(),
            ventral: TrainConfig::default(),
            joint: TrainConfig {
                total_steps: 3000,
                ..Default::default()
            },
            finetune: FinetuneConfig::default(),
            data: DataConfig::default(),
        }
    }
}

// distinct streams for each stage derived from one seed
const VENTRAL_STREAM: u64 = 0x01;
const JOINT_STREAM: u64 = 0x02;
const FINETUNE_STREAM: u64 = 0x03;
const DATA_STREAM: u64 = 0x04;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| config_err!("invalid configuration: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.motion.validate()?;
        self.ventral.validate(self.model.num_taps())?;
        self.joint.validate(self.model.num_taps())?;
        self.joint.shared_blocks(&self.model.separation, self.model.depth)?;
        self.ventral_branch()?;
        self.dorsal_branch()?;
        Ok(())
    }

    /// Derives every stage seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let mix = |s: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s);
        self.ventral.seed = mix(VENTRAL_STREAM);
        self.joint.seed = mix(JOINT_STREAM);
        self.finetune.seed = mix(FINETUNE_STREAM);
        self.data.seed = mix(DATA_STREAM);
        self
    }

    pub fn gabor_bank(&self) -> Result<Vec<GaborKernel>> {
        build_gabor_bank(&self.targets.gabor)
    }

    pub fn ventral_branch(&self) -> Result<Branch> {
        let shape = InputShape {
            frames: 1,
            height: self.image.height,
            width: self.image.width,
            channels: self.image.channels,
        };
        Branch::new(BranchKind::Ventral, self.model.clone(), shape, self.targets.gabor.num_kernels())
    }

    /// Dorsal branch without sharing installed.
    pub fn dorsal_branch(&self) -> Result<Branch> {
        let c = &self.motion.clip;
        let shape = InputShape {
            frames: c.frames(),
            height: c.height,
            width: c.width,
            channels: c.channels,
        };
        Branch::new(BranchKind::Dorsal, self.model.clone(), shape, self.targets.gabor.num_kernels())
    }

    /// Dorsal branch with the configured sharing, as laid out after joint setup.
    pub fn shared_dorsal_branch(&self) -> Result<Branch> {
        let upto = self.joint.shared_blocks(&self.model.separation, self.model.depth)?;
        self.dorsal_branch()?.with_shared(Some(SharedBlocks {
            owner: BranchKind::Ventral,
            upto,
        }))
    }

    pub fn shapes_dataset(&self) -> Result<ImageDataset> {
        gen_synthetic_shapes_dataset(&self.image, self.data.shapes, self.data.seed)
    }

    pub fn motion_dataset(&self) -> Result<ClipDataset> {
        gen_synthetic_motion_dataset(&self.motion, self.data.motion, self.data.seed)
    }

    /// Labeled train/test motion clips, disjoint from the pretraining stream.
    pub fn finetune_datasets(&self) -> Result<(ClipDataset, ClipDataset)> {
        let s = self.data.seed ^ 0xF1E7_0000;
        let train = gen_synthetic_motion_dataset(&self.motion, self.data.finetune_train, s)?;
        let test = gen_synthetic_motion_dataset(&self.motion, self.data.finetune_test, s ^ 0x7E57)?;
        Ok((train, test))
    }

    /// A small setup that runs every stage in seconds: 16x16 inputs, 4-frame
    /// clips and a narrow 12-block encoder.
    pub fn toy() -> Self {
        let mut cfg = ExperimentConfig {
            model: ModelConfig {
                d_model: 32,
                heads: 2,
                ..Default::default()
            },
            image: ImageSpec {
                height: 16,
                width: 16,
                channels: 3,
            },
            motion: MotionSpec {
                clip: ClipSpec {
                    height: 16,
                    width: 16,
                    channels: 3,
                    raw_frames: 8,
                    stride: 2,
                },
                side_min: 4,
                side_max: 6,
                speed_min: 1,
                speed_max: 2,
            },
            data: DataConfig {
                shapes: 64,
                motion: 64,
                finetune_train: 64,
                finetune_test: 32,
                seed: 0,
            },
            ..Default::default()
        };
        for t in [&mut cfg.ventral, &mut cfg.joint] {
            t.total_steps = 30;
            t.warmup_steps = 5;
        }
        cfg.finetune.epochs = 2;
        cfg.finetune.warmup_steps = 2;
        cfg
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}

/// Fresh ventral weights trained on `images`.
pub fn run_pretrain_ventral(
    cfg: &ExperimentConfig,
    images: &[crate::patching::Image],
    on_report: impl FnMut(&LossReport) -> Result<()>,
) -> Result<(ParamStore<f32>, Vec<LossReport>)> {
    let branch = cfg.ventral_branch()?;
    let mut store = init_encoder(&branch, cfg.ventral.seed)?;
    let bank = cfg.gabor_bank()?;
    let tb = TargetBuilder {
        cfg: &cfg.targets,
        bank: &bank,
    };
    let reports = pretrain_ventral(&mut store, &branch, images, &tb, &cfg.ventral, on_report)?;
    Ok((store, reports))
}

/// Joint pretraining from the ventral weights in `store` (pretrained or fresh).
pub fn run_pretrain_joint(
    cfg: &ExperimentConfig,
    store: &mut ParamStore<f32>,
    clips: &[Clip],
    on_report: impl FnMut(&LossReport) -> Result<()>,
) -> Result<(Branch, Vec<LossReport>)> {
    let ventral = cfg.ventral_branch()?;
    let bank = cfg.gabor_bank()?;
    let tb = TargetBuilder {
        cfg: &cfg.targets,
        bank: &bank,
    };
    pretrain_joint(store, &ventral, cfg.dorsal_branch()?, clips, &tb, &cfg.joint, on_report)
}

/// A dorsal encoder with random weights, laid out like a jointly pretrained one.
pub fn random_dorsal(cfg: &ExperimentConfig, seed: u64) -> Result<(ParamStore<f32>, Branch)> {
    let ventral = cfg.ventral_branch()?;
    let mut store = init_encoder(&ventral, seed)?;
    let dorsal = setup_dorsal(&mut store, &ventral, cfg.dorsal_branch()?, &cfg.joint)?;
    Ok((store, dorsal))
}

pub fn clip_tokens(branch: &Branch, clips: &[Clip]) -> Result<Vec<Tensor<f32>>> {
    clips.iter().map(|c| tokenize(branch, BranchInput::Clip(c))).collect()
}

/// Motion-direction classification on the dorsal branch.
pub fn run_finetune(
    ft: &FinetuneConfig,
    store: &mut ParamStore<f32>,
    dorsal: &Branch,
    train: &ClipDataset,
    test: &ClipDataset,
    on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<FinetuneReport> {
    let tr = clip_tokens(dorsal, &train.clips)?;
    let te = clip_tokens(dorsal, &test.clips)?;
    finetune(
        store,
        dorsal,
        LabeledTokens {
            grids: &tr,
            labels: &train.labels,
        },
        LabeledTokens {
            grids: &te,
            labels: &test.labels,
        },
        crate::data::MOTION_CLASSES.len(),
        ft,
        on_epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"model": {"depth": 4, "separation": [1, 2, 4]}}"#).unwrap();
        assert_eq!(partial.model.depth, 4);
        assert!(ExperimentConfig::from_json(r#"{"model": {"depth": 4}}"#).is_err());
    }

    #[test]
    fn seeds_are_derived_per_stage() {
        let a = ExperimentConfig::default().with_seed(7);
        assert_eq!(a, ExperimentConfig::default().with_seed(7));
        assert_ne!(a.ventral.seed, a.joint.seed);
        assert_ne!(a, ExperimentConfig::default().with_seed(8));
    }

    #[test]
    fn toy_config_validates() {
        ExperimentConfig::toy().validate().unwrap();
    }
}
