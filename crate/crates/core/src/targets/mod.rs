//! Per-token reconstruction targets: Gabor texture, Sobel contour, normalized
//! pixels and frame-difference motion, aligned with the branch token grids.
//!
//! Targets are computed on whole frames and then cut into the same patches
//! (or cubes) as the encoder input, so token `i` of every target describes
//! the same pixels as token `i` of the input grid.

mod filters;

pub use filters::{
    build_gabor_bank, gabor_responses, sobel_magnitude, GaborBankConfig, GaborKernel,
};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::numerics::Tensor;
use crate::patching::{cubify_thwc, patchify_hwc, Clip, Image, MaskSpec};
use crate::BranchKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Gabor,
    Contour,
    Rgb,
    Motion,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Gabor => "gabor",
            TargetKind::Contour => "contour",
            TargetKind::Rgb => "rgb",
            TargetKind::Motion => "motion",
        }
    }
}

/// Target assignment for a branch with `taps` readouts: the deepest tap
/// always reconstructs pixels (ventral) or motion (dorsal), shallower taps
/// take contour, then Gabor.
pub fn tap_targets(branch: BranchKind, taps: usize) -> Result<Vec<TargetKind>> {
    let last = match branch {
        BranchKind::Ventral => TargetKind::Rgb,
        BranchKind::Dorsal => TargetKind::Motion,
    };
    let order = [TargetKind::Gabor, TargetKind::Contour, last];
    if taps == 0 || taps > order.len() {
        return Err(config_err!("between 1 and 3 taps are supported, got {taps}"));
    }
    Ok(order[order.len() - taps..].to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub gabor: GaborBankConfig,
    pub contour_eps: f64,
    pub normalize_gabor: bool,
    pub normalize_contour: bool,
    pub normalize_rgb: bool,
    pub normalize_motion: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            gabor: GaborBankConfig::default(),
            contour_eps: 1e-8,
            normalize_gabor: false,
            normalize_contour: false,
            normalize_rgb: true,
            normalize_motion: false,
        }
    }
}

impl TargetConfig {
    fn normalize(&self, kind: TargetKind) -> bool {
        match kind {
            TargetKind::Gabor => self.normalize_gabor,
            TargetKind::Contour => self.normalize_contour,
            TargetKind::Rgb => self.normalize_rgb,
            TargetKind::Motion => self.normalize_motion,
        }
    }
}

/// Token geometry shared by inputs and targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub patch: usize,
    /// Temporal cube extent; unused for images.
    pub tubelet: usize,
}

/// Width of a target row for the given branch input shape.
pub fn target_dim(
    kind: TargetKind,
    branch: BranchKind,
    geom: TokenGeometry,
    channels: usize,
    gabor_kernels: usize,
) -> Result<usize> {
    let area = geom.patch * geom.patch;
    let frames = match branch {
        BranchKind::Ventral => 1,
        BranchKind::Dorsal => geom.tubelet,
    };
    Ok(match (kind, branch) {
        (TargetKind::Gabor, _) => frames * area * gabor_kernels,
        (TargetKind::Contour, _) => frames * area,
        (TargetKind::Rgb, BranchKind::Ventral) => area * channels,
        (TargetKind::Motion, BranchKind::Dorsal) => area * channels,
        (k, b) => return Err(config_err!("{} target is not defined for the {b:?} branch", k.name())),
    })
}

/// Per-token standardization `(x - mean) / sqrt(var + 1e-6)`.
///
/// Returns the normalized tokens and each token's `(mean, std)` so that
/// predictions can be mapped back to pixel space.
pub fn normalize_tokens(tokens: &Tensor<f32>) -> (Tensor<f32>, Vec<(f32, f32)>) {
    let d = tokens.cols();
    let mut out = tokens.clone();
    let mut stats = Vec::with_capacity(tokens.rows());
    if d == 0 {
        return (out, stats);
    }
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let std = (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) / std) as f32;
        }
        stats.push((mean as f32, std as f32));
    }
    (out, stats)
}

fn maybe_normalize(t: Tensor<f32>, on: bool) -> Tensor<f32> {
    if on {
        normalize_tokens(&t).0
    } else {
        t
    }
}

pub fn gabor_target_image(image: &Image, bank: &[GaborKernel], patch: usize) -> Result<Tensor<f32>> {
    let k = bank.len();
    let resp = gabor_responses(&image.grayscale(), image.height, image.width, bank);
    let rows = patchify_hwc(&resp, image.height, image.width, k, patch)?;
    Tensor::new(vec![rows.len() / (patch * patch * k), patch * patch * k], rows)
}

pub fn gabor_target_clip(
    clip: &Clip,
    bank: &[GaborKernel],
    geom: TokenGeometry,
) -> Result<Tensor<f32>> {
    let k = bank.len();
    let mut stack = Vec::with_capacity(clip.frames * clip.height * clip.width * k);
    for t in 0..clip.frames {
        let gray = clip.frame(t).grayscale();
        stack.extend(gabor_responses(&gray, clip.height, clip.width, bank));
    }
    let rows = cubify_thwc(&stack, clip.frames, clip.height, clip.width, k, geom.tubelet, geom.patch)?;
    let d = geom.tubelet * geom.patch * geom.patch * k;
    Tensor::new(vec![rows.len() / d, d], rows)
}

pub fn contour_target_image(image: &Image, eps: f64, patch: usize) -> Result<Tensor<f32>> {
    let mag = sobel_magnitude(&image.grayscale(), image.height, image.width, eps);
    let rows = patchify_hwc(&mag, image.height, image.width, 1, patch)?;
    Tensor::new(vec![rows.len() / (patch * patch), patch * patch], rows)
}

pub fn contour_target_clip(clip: &Clip, eps: f64, geom: TokenGeometry) -> Result<Tensor<f32>> {
    let mut stack = Vec::with_capacity(clip.frames * clip.height * clip.width);
    for t in 0..clip.frames {
        let gray = clip.frame(t).grayscale();
        stack.extend(sobel_magnitude(&gray, clip.height, clip.width, eps));
    }
    let rows = cubify_thwc(&stack, clip.frames, clip.height, clip.width, 1, geom.tubelet, geom.patch)?;
    let d = geom.tubelet * geom.patch * geom.patch;
    Tensor::new(vec![rows.len() / d, d], rows)
}

/// Pixel targets from patchified image tokens.
pub fn rgb_target(tokens: &Tensor<f32>, normalize: bool) -> Tensor<f32> {
    maybe_normalize(tokens.clone(), normalize)
}

/// `|second - first|` frame difference over each cube's footprint.
pub fn motion_target(clip: &Clip, geom: TokenGeometry, normalize: bool) -> Result<Tensor<f32>> {
    if geom.tubelet != 2 {
        return Err(config_err!(
            "motion targets are defined between two adjacent frames; tubelet {} is unsupported",
            geom.tubelet
        ));
    }
    let p = geom.patch;
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    if clip.frames % 2 != 0 || h % p != 0 || w % p != 0 {
        return Err(config_err!(
            "clip {}x{h}x{w} does not tile into cubes (2, {p}, {p})",
            clip.frames
        ));
    }
    let (gt, gh, gw) = (clip.frames / 2, h / p, w / p);
    let d = p * p * c;
    let mut out = Vec::with_capacity(gt * gh * gw * d);
    for qt in 0..gt {
        let f1 = clip.frame_data(2 * qt);
        let f2 = clip.frame_data(2 * qt + 1);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let start = ((py * p + y) * w + px * p) * c;
                    for i in start..start + p * c {
                        out.push((f2[i] - f1[i]).abs());
                    }
                }
            }
        }
    }
    let t = Tensor::new(vec![gt * gh * gw, d], out)?;
    Ok(maybe_normalize(t, normalize))
}

/// A branch's input sample.
#[derive(Clone, Copy, Debug)]
pub enum BranchInput<'a> {
    Image(&'a Image),
    Clip(&'a Clip),
}

/// One target matrix per tap, `(N, D_tap)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub kinds: Vec<TargetKind>,
    pub maps: Vec<Tensor<f32>>,
}

pub fn build_target_set(
    input: BranchInput<'_>,
    kinds: &[TargetKind],
    cfg: &TargetConfig,
    bank: &[GaborKernel],
    geom: TokenGeometry,
) -> Result<TargetSet> {
    let mut maps = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let raw = match (kind, input) {
            (TargetKind::Gabor, BranchInput::Image(img)) => gabor_target_image(img, bank, geom.patch)?,
            (TargetKind::Gabor, BranchInput::Clip(clip)) => gabor_target_clip(clip, bank, geom)?,
            (TargetKind::Contour, BranchInput::Image(img)) => {
                contour_target_image(img, cfg.contour_eps, geom.patch)?
            }
            (TargetKind::Contour, BranchInput::Clip(clip)) => {
                contour_target_clip(clip, cfg.contour_eps, geom)?
            }
            (TargetKind::Rgb, BranchInput::Image(img)) => {
                let rows = patchify_hwc(&img.data, img.height, img.width, img.channels, geom.patch)?;
                let d = geom.patch * geom.patch * img.channels;
                Tensor::new(vec![rows.len() / d, d], rows)?
            }
            (TargetKind::Motion, BranchInput::Clip(clip)) => motion_target(clip, geom, false)?,
            (k, _) => {
                return Err(config_err!("{} target does not apply to this input", k.name()))
            }
        };
        maps.push(maybe_normalize(raw, cfg.normalize(kind)));
    }
    Ok(TargetSet {
        kinds: kinds.to_vec(),
        maps,
    })
}

/// Target rows at the masked positions, ascending.
pub fn gather_masked_targets(tset: &TargetSet, mask: &MaskSpec) -> Result<Vec<Tensor<f32>>> {
    tset.maps
        .iter()
        .map(|m| {
            if m.rows() != mask.num_tokens {
                return Err(contract_err!(
                    "mask over {} tokens applied to a target of {} rows",
                    mask.num_tokens,
                    m.rows()
                ));
            }
            m.gather_rows(&mask.masked)
        })
        .collect()
}
