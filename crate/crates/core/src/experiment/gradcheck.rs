use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{init_encoder, Branch, InputShape, ModelConfig};
use crate::numerics::{finite_diff_grad, relative_error, sample_coords, Coord, Graph, ParamStore};
use crate::patching::{sample_random_mask, sample_tube_mask, Clip, Image};
use crate::targets::{build_gabor_bank, BranchInput, TargetConfig};
use crate::training::{joint_losses, setup_dorsal, JointBatch, MaskedBatch, TargetBuilder, TrainConfig};
use crate::BranchKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub targets: TargetConfig,
    pub size: usize,
    pub frames: usize,
    pub batch: usize,
    /// Sampled coordinates per decoder.
    pub per_decoder: usize,
    /// Additional coordinates drawn over all parameters.
    pub extra: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error. Central differences in f64
    /// carry about 1e-9 of rounding noise at h = 1e-6, so gradients below the
    /// floor are in effect compared to an absolute tolerance of floor * tolerance.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                depth: 4,
                separation: vec![1, 2, 4],
                d_model: 32,
                heads: 4,
                init_std: 0.2,
                ..Default::default()
            },
            train: TrainConfig {
                lambda: 0.7,
                tap_weights: vec![0.5, 1.0, 1.5],
                ..Default::default()
            },
            targets: TargetConfig::default(),
            size: 16,
            frames: 4,
            batch: 2,
            per_decoder: 6,
            extra: 40,
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub pass: bool,
}

/// Analytic gradients of the joint loss against central differences, in
/// 64-bit, on a small two-branch model with every decoder present.
pub fn gradcheck_joint(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let img_shape = InputShape {
        frames: 1,
        height: cfg.size,
        width: cfg.size,
        channels: 3,
    };
    let k = cfg.targets.gabor.num_kernels();
    let ventral = Branch::new(BranchKind::Ventral, cfg.model.clone(), img_shape, k)?;
    let dorsal = Branch::new(
        BranchKind::Dorsal,
        cfg.model.clone(),
        InputShape {
            frames: cfg.frames,
            ..img_shape
        },
        k,
    )?;
    let mut store32 = init_encoder::<f32>(&ventral, cfg.seed)?;
    let dorsal = setup_dorsal(&mut store32, &ventral, dorsal, &cfg.train)?;
    let mut store: ParamStore<f64> = store32.cast();

    let bank = build_gabor_bank(&cfg.targets.gabor)?;
    let tb = TargetBuilder {
        cfg: &cfg.targets,
        bank: &bank,
    };
    let n = cfg.size * cfg.size * 3;
    let clips: Vec<Clip> = (0..cfg.batch)
        .map(|_| Clip::new(cfg.frames, cfg.size, cfg.size, 3, (0..cfg.frames * n).map(|_| rng.gen()).collect()))
        .collect::<Result<_>>()?;
    let images: Vec<Image> = clips.iter().map(|c| c.frame(0)).collect();
    let vp = images
        .iter()
        .map(|i| tb.prepare(&ventral, BranchInput::Image(i)))
        .collect::<Result<Vec<_>>>()?;
    let dp = clips
        .iter()
        .map(|c| tb.prepare(&dorsal, BranchInput::Clip(c)))
        .collect::<Result<Vec<_>>>()?;
    let vm = (0..cfg.batch)
        .map(|_| sample_random_mask(ventral.num_tokens(), cfg.train.mask.ratio_image, rng.gen()))
        .collect::<Result<Vec<_>>>()?;
    let dm = (0..cfg.batch)
        .map(|_| {
            sample_tube_mask(
                dorsal.layout.spatial_tokens(),
                dorsal.layout.temporal_cubes(),
                cfg.train.mask.ratio_video,
                rng.gen(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let vb = MaskedBatch::assemble(&vp.iter().collect::<Vec<_>>(), vm, cfg.train.loss_on)?.cast::<f64>();
    let db = MaskedBatch::assemble(&dp.iter().collect::<Vec<_>>(), dm, cfg.train.loss_on)?.cast::<f64>();

    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let jl = joint_losses(&mut g, s, &ventral, &dorsal, JointBatch { ventral: &vb, dorsal: &db }, &cfg.train)?;
        Ok(g.value(jl.l).item())
    };
    let mut g = Graph::new();
    let jl = joint_losses(&mut g, &store, &ventral, &dorsal, JointBatch { ventral: &vb, dorsal: &db }, &cfg.train)?;
    store.zero_grad();
    g.backward(jl.l, &mut store)?;

    let mut coords: Vec<Coord> = Vec::new();
    for (bi, b) in [&ventral, &dorsal].into_iter().enumerate() {
        for tap in 0..b.cfg.num_taps() {
            let p = format!("{}.", b.decoder_prefix(tap));
            let seed = cfg.seed ^ ((bi * 16 + tap) as u64 + 1);
            coords.extend(sample_coords(&store, cfg.per_decoder, seed, |name| name.starts_with(&p)));
        }
    }
    coords.extend(sample_coords(&store, cfg.extra, cfg.seed ^ 0xA11, |_| true));

    let analytic: Vec<f64> = coords
        .iter()
        .map(|c| store.grad(&c.name).map_or(0.0, |g| g.data()[c.index]))
        .collect();
    let numeric = finite_diff_grad(loss, &mut store, &coords, cfg.step)?;
    let (mut max, mut worst) = (0.0f64, String::new());
    for ((c, a), n) in coords.iter().zip(&analytic).zip(&numeric) {
        let e = relative_error(*a, *n, cfg.floor);
        if e > max || !e.is_finite() {
            max = e;
            worst = format!("{}[{}]: analytic {a:e}, numeric {n:e}", c.name, c.index);
        }
    }
    Ok(GradcheckReport {
        coords: coords.len(),
        max_rel_err: max,
        worst,
        pass: max < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_gradients_match_finite_differences() {
        let r = gradcheck_joint(&GradcheckConfig::default()).unwrap();
        assert!(r.coords >= 60);
        assert!(r.pass, "{r:?}");
    }
}
