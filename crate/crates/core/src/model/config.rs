use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    /// 1-based block indices whose outputs are read out, strictly increasing,
    /// last entry equal to `depth`.
    pub separation: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub tubelet: usize,
    pub decoder_depth: usize,
    /// Defaults to `d_model / 2`.
    pub decoder_width: Option<usize>,
    /// Defaults to `heads`.
    pub decoder_heads: Option<usize>,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 12,
            separation: vec![2, 4, 12],
            d_model: 96,
            heads: 4,
            mlp_ratio: 4,
            patch: 4,
            tubelet: 2,
            decoder_depth: 1,
            decoder_width: None,
            decoder_heads: None,
            init_std: 0.02,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn decoder_width(&self) -> usize {
        self.decoder_width.unwrap_or(self.d_model / 2)
    }

    pub fn decoder_heads(&self) -> usize {
        self.decoder_heads.unwrap_or(self.heads)
    }

    pub fn num_taps(&self) -> usize {
        self.separation.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config_err!("encoder depth must be positive"));
        }
        if self.separation.is_empty() {
            return Err(config_err!("separation needs at least one tap"));
        }
        if self.separation.windows(2).any(|w| w[0] >= w[1]) || self.separation[0] == 0 {
            return Err(config_err!(
                "separation {:?} must be strictly increasing 1-based block indices",
                self.separation
            ));
        }
        if *self.separation.last().unwrap() != self.depth {
            return Err(config_err!(
                "last tap {:?} must equal depth {}",
                self.separation.last(),
                self.depth
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(config_err!(
                "d_model {} not divisible by {} heads",
                self.d_model,
                self.heads
            ));
        }
        let (dw, dh) = (self.decoder_width(), self.decoder_heads());
        if dw == 0 || dh == 0 || dw % dh != 0 {
            return Err(config_err!("decoder width {dw} not divisible by {dh} heads"));
        }
        if self.mlp_ratio == 0 || self.patch == 0 || self.tubelet == 0 {
            return Err(config_err!("mlp ratio, patch and tubelet must be positive"));
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return Err(config_err!("init_std and ln_eps must be positive"));
        }
        Ok(())
    }
}

/// Pixel extents of a branch input; `frames` is 1 for images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Mean,
    ClassToken,
}

impl std::str::FromStr for PoolMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolMode::Mean),
            "class_token" => Ok(PoolMode::ClassToken),
            other => Err(config_err!("unknown pool mode {other:?}")),
        }
    }
}

/// Which decoder rows are produced and supervised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossOn {
    #[default]
    Masked,
    All,
}
