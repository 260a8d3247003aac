use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

/// Channel-last still image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel mean, `height x width`.
    pub fn grayscale(&self) -> Vec<f32> {
        let c = self.channels as f32;
        self.data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f32>() / c)
            .collect()
    }
}

/// `frames x height x width x channels` clip, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Clip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(shape_err!(
                "{} values for a {frames}x{height}x{width}x{channels} clip",
                data.len()
            ));
        }
        Ok(Clip {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| shape_err!("a clip needs at least one frame"))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if (f.height, f.width, f.channels) != (first.height, first.width, first.channels) {
                return Err(shape_err!("frames of a clip must share extents"));
            }
            data.extend_from_slice(&f.data);
        }
        Clip::new(frames.len(), first.height, first.width, first.channels, data)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame_data(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn frame(&self, t: usize) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.frame_data(t).to_vec(),
        }
    }
}

/// Raw-to-compressed clip geometry: `raw_frames` consecutive frames sampled
/// with temporal stride `stride` give `raw_frames / stride` model frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub raw_frames: usize,
    pub stride: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec {
            height: 32,
            width: 32,
            channels: 3,
            raw_frames: 16,
            stride: 2,
        }
    }
}

impl ClipSpec {
    pub fn frames(&self) -> usize {
        self.raw_frames / self.stride.max(1)
    }

    pub fn validate(&self, tubelet: usize) -> Result<()> {
        if self.stride == 0 || self.raw_frames % self.stride != 0 {
            return Err(config_err!(
                "raw frame count {} not divisible by stride {}",
                self.raw_frames,
                self.stride
            ));
        }
        if tubelet == 0 || self.frames() % tubelet != 0 {
            return Err(config_err!(
                "{} frames not divisible by tubelet {tubelet}",
                self.frames()
            ));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(config_err!("empty clip extents"));
        }
        Ok(())
    }
}
