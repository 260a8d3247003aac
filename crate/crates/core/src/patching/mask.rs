use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenGrid;
use crate::error::{config_err, contract_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Tube,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub ratio_image: f64,
    pub ratio_video: f64,
    pub video_strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            ratio_image: 0.75,
            ratio_video: 0.9,
            video_strategy: MaskStrategy::Tube,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio_image)?;
        check_ratio(self.ratio_video)
    }
}

/// Which token positions are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub num_tokens: usize,
    /// Sorted ascending.
    pub masked: Vec<usize>,
    /// Sorted ascending; complement of `masked`.
    pub visible: Vec<usize>,
}

impl MaskSpec {
    pub fn from_masked(num_tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= num_tokens) {
            return Err(contract_err!("masked index outside 0..{num_tokens}"));
        }
        let mut flags = vec![false; num_tokens];
        for &m in &masked {
            flags[m] = true;
        }
        let visible = (0..num_tokens).filter(|&i| !flags[i]).collect();
        Ok(MaskSpec {
            num_tokens,
            masked,
            visible,
        })
    }

    pub fn none(num_tokens: usize) -> Self {
        MaskSpec {
            num_tokens,
            masked: Vec::new(),
            visible: (0..num_tokens).collect(),
        }
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.masked.binary_search(&idx).is_ok()
    }
}

/// `floor(ratio * n + 0.5)`.
pub fn round_half_up(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(config_err!("mask ratio {ratio} outside [0, 1)"));
    }
    Ok(())
}

/// `k` distinct values from `0..n`, via a partial Fisher-Yates shuffle.
fn choose(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        perm.swap(i, j);
    }
    perm.truncate(k);
    perm
}

pub fn sample_random_mask(num_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    if num_tokens == 0 {
        return Err(config_err!("cannot mask an empty grid"));
    }
    let k = round_half_up(ratio, num_tokens);
    MaskSpec::from_masked(num_tokens, choose(num_tokens, k, seed))
}

/// Masks the same spatial positions at every temporal index.
pub fn sample_tube_mask(
    spatial_tokens: usize,
    temporal_cubes: usize,
    ratio: f64,
    seed: u64,
) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    if spatial_tokens == 0 || temporal_cubes == 0 {
        return Err(config_err!("cannot mask an empty grid"));
    }
    let k = round_half_up(ratio, spatial_tokens);
    let positions = choose(spatial_tokens, k, seed);
    let masked = (0..temporal_cubes)
        .flat_map(|t| positions.iter().map(move |&s| t * spatial_tokens + s))
        .collect();
    MaskSpec::from_masked(spatial_tokens * temporal_cubes, masked)
}

/// Visible tokens in ascending order, with their original indices.
pub fn gather_visible(grid: &TokenGrid, mask: &MaskSpec) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = grid.tokens.rows();
    if mask.num_tokens != n {
        return Err(contract_err!(
            "mask over {} tokens applied to a grid of {n}",
            mask.num_tokens
        ));
    }
    let tokens = grid.tokens.gather_rows(&mask.visible)?;
    Ok((tokens, mask.visible.clone()))
}
