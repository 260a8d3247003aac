use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::patching::{Clip, ClipSpec, Image};

/// Motion classes, in label order.
pub const MOTION_CLASSES: [&str; 4] = ["right", "left", "up", "down"];
/// Shape classes, in label order.
pub const SHAPE_CLASSES: [&str; 4] = ["square", "disk", "cross", "stripes"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionSpec {
    pub clip: ClipSpec,
    pub side_min: usize,
    pub side_max: usize,
    /// Pixels per model frame (one temporal stride of raw frames).
    pub speed_min: usize,
    pub speed_max: usize,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            clip: ClipSpec::default(),
            side_min: 6,
            side_max: 10,
            speed_min: 1,
            speed_max: 2,
        }
    }
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.clip;
        if c.stride == 0 || c.raw_frames == 0 || c.raw_frames % c.stride != 0 {
            return Err(config_err!("raw frames {} not divisible by stride {}", c.raw_frames, c.stride));
        }
        if self.side_min == 0 || self.side_min > self.side_max || self.speed_min > self.speed_max {
            return Err(config_err!("empty square side or speed range"));
        }
        let travel = self.speed_max * (c.frames() - 1);
        if self.side_max + travel > c.height.min(c.width) {
            return Err(config_err!(
                "a {}px square moving {travel}px does not fit a {}x{} frame",
                self.side_max,
                c.height,
                c.width
            ));
        }
        Ok(())
    }
}

/// Everything random about one motion clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionParams {
    pub label: usize,
    pub side: usize,
    pub speed: usize,
    /// Top-left corner at model frame 0.
    pub y0: usize,
    pub x0: usize,
    pub fg: f32,
    pub bg: f32,
}

fn sample_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn motion_params(spec: &MotionSpec, seed: u64, index: usize) -> MotionParams {
    let mut rng = sample_stream(seed, index);
    let label = index % 4;
    let side = rng.gen_range(spec.side_min..=spec.side_max);
    let speed = rng.gen_range(spec.speed_min..=spec.speed_max);
    let travel = speed * (spec.clip.frames() - 1);
    let (h, w) = (spec.clip.height, spec.clip.width);
    let along = |rng: &mut ChaCha8Rng, extent: usize| rng.gen_range(0..=extent - side - travel);
    let across = |rng: &mut ChaCha8Rng, extent: usize| rng.gen_range(0..=extent - side);
    let (y0, x0) = match label {
        0 => (across(&mut rng, h), along(&mut rng, w)),
        1 => (across(&mut rng, h), along(&mut rng, w) + travel),
        2 => (along(&mut rng, h) + travel, across(&mut rng, w)),
        _ => (along(&mut rng, h), across(&mut rng, w)),
    };
    MotionParams {
        label,
        side,
        speed,
        y0,
        x0,
        fg: rng.gen_range(0.6..1.0),
        bg: rng.gen_range(0.0..0.4),
    }
}

/// Square position after `offset` pixels of travel.
fn moved(p: &MotionParams, offset: usize) -> (usize, usize) {
    match p.label {
        0 => (p.y0, p.x0 + offset),
        1 => (p.y0, p.x0 - offset),
        2 => (p.y0 - offset, p.x0),
        _ => (p.y0 + offset, p.x0),
    }
}

fn draw_frame(p: &MotionParams, spec: &ClipSpec, offset: usize, out: &mut Vec<f32>) {
    let (y, x) = moved(p, offset);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let inside = (y..y + p.side).contains(&r) && (x..x + p.side).contains(&c);
            let v = if inside { p.fg } else { p.bg };
            out.extend(std::iter::repeat_n(v, spec.channels));
        }
    }
}

/// Model-rate clip: frame `t` shows the square displaced by `speed * t`.
pub fn render_motion_clip(p: &MotionParams, spec: &ClipSpec) -> Result<Clip> {
    let frames = spec.frames();
    let mut data = Vec::with_capacity(frames * spec.height * spec.width * spec.channels);
    for t in 0..frames {
        draw_frame(p, spec, p.speed * t, &mut data);
    }
    Clip::new(frames, spec.height, spec.width, spec.channels, data)
}

/// Raw-rate frames: raw frame `r` is displaced by `floor(speed * r / stride)`,
/// so sampling every `stride`-th frame reproduces [`render_motion_clip`].
pub fn render_motion_raw(p: &MotionParams, spec: &ClipSpec) -> Result<Vec<Image>> {
    (0..spec.raw_frames)
        .map(|r| {
            let mut data = Vec::with_capacity(spec.height * spec.width * spec.channels);
            draw_frame(p, spec, p.speed * r / spec.stride, &mut data);
            Image::new(spec.height, spec.width, spec.channels, data)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    pub clips: Vec<Clip>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

/// Per-clip parameters of a motion dataset; label `i % 4` keeps classes balanced.
pub fn motion_dataset_params(spec: &MotionSpec, n: usize, seed: u64) -> Result<Vec<MotionParams>> {
    spec.validate()?;
    Ok((0..n).map(|i| motion_params(spec, seed, i)).collect())
}

/// One bright square translating in one of four directions per clip.
pub fn gen_synthetic_motion_dataset(spec: &MotionSpec, n: usize, seed: u64) -> Result<ClipDataset> {
    let params = motion_dataset_params(spec, n, seed)?;
    let clips = params
        .iter()
        .map(|p| render_motion_clip(p, &spec.clip))
        .collect::<Result<_>>()?;
    Ok(ClipDataset {
        clips,
        labels: params.iter().map(|p| p.label).collect(),
    })
}

fn render_shape(label: usize, spec: &ImageSpec, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (spec.height, spec.width);
    let fg: f32 = rng.gen_range(0.6..1.0);
    let bg: f32 = rng.gen_range(0.0..0.4);
    let size = rng.gen_range(h.min(w) * 3 / 8..=h.min(w) * 5 / 8).max(3);
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    // stripes: bar grating with period 4 or 8, vertical or horizontal bars
    let period = if rng.gen_bool(0.5) { 4 } else { 8 };
    let vertical = rng.gen_bool(0.5);
    let phase = rng.gen_range(0..period);
    let half = size as f32 / 2.0;
    let (cy, cx) = (y0 as f32 + half - 0.5, x0 as f32 + half - 0.5);
    let arm = (size / 6).max(1) as f32;
    let mut data = Vec::with_capacity(h * w * spec.channels);
    for r in 0..h {
        for c in 0..w {
            let inside_box = (y0..y0 + size).contains(&r) && (x0..x0 + size).contains(&c);
            let (dy, dx) = (r as f32 - cy, c as f32 - cx);
            let on = inside_box
                && match label {
                    0 => true,
                    1 => dy * dy + dx * dx <= half * half,
                    2 => dy.abs() <= arm || dx.abs() <= arm,
                    _ => {
                        let k = if vertical { c } else { r };
                        (k + phase) % period < period / 2
                    }
                };
            let v = if on { fg } else { bg };
            data.extend(std::iter::repeat_n(v, spec.channels));
        }
    }
    Image::new(h, w, spec.channels, data).expect("sized by construction")
}

/// Square, disk, cross and stripe images; label `i % 4`.
pub fn gen_synthetic_shapes_dataset(spec: &ImageSpec, n: usize, seed: u64) -> Result<ImageDataset> {
    if spec.height.min(spec.width) < 8 || spec.channels == 0 {
        return Err(config_err!("shape images need at least 8x8 pixels"));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_stream(seed, i);
        images.push(render_shape(i % 4, spec, &mut rng));
        labels.push(i % 4);
    }
    Ok(ImageDataset { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_column(frame: &Image, fg: f32) -> usize {
        let w = frame.width;
        (0..frame.height * w)
            .find(|&i| frame.data[i * frame.channels] == fg)
            .map(|i| i % w)
            .unwrap()
    }

    #[test]
    fn right_moving_square_advances() {
        let spec = MotionSpec::default();
        let ds = motion_dataset_params(&spec, 40, 3).unwrap();
        let p = ds.iter().find(|p| p.label == 0 && p.speed == 1).unwrap();
        let clip = render_motion_clip(p, &spec.clip).unwrap();
        let cols: Vec<usize> = (0..clip.frames).map(|t| square_column(&clip.frame(t), p.fg)).collect();
        assert!(cols.windows(2).all(|w| w[1] > w[0]), "{cols:?}");
    }

    #[test]
    fn balanced_and_deterministic() {
        let spec = MotionSpec::default();
        let a = gen_synthetic_motion_dataset(&spec, 400, 1).unwrap();
        assert_eq!(a, gen_synthetic_motion_dataset(&spec, 400, 1).unwrap());
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert!(a.clips.iter().all(|c| c.data.iter().all(|v| (0.0..=1.0).contains(v))));
        let s = gen_synthetic_shapes_dataset(&ImageSpec::default(), 40, 2).unwrap();
        assert_eq!(s, gen_synthetic_shapes_dataset(&ImageSpec::default(), 40, 2).unwrap());
        assert_eq!(s.labels.iter().filter(|&&l| l == 3).count(), 10);
    }

    #[test]
    fn raw_frames_subsample_to_model_frames() {
        let spec = MotionSpec::default();
        for p in motion_dataset_params(&spec, 8, 5).unwrap() {
            let raw = render_motion_raw(&p, &spec.clip).unwrap();
            let clip = render_motion_clip(&p, &spec.clip).unwrap();
            for t in 0..clip.frames {
                assert_eq!(raw[t * spec.clip.stride], clip.frame(t));
            }
        }
    }

    #[test]
    fn too_small_geometry_rejected() {
        let spec = MotionSpec {
            clip: ClipSpec {
                height: 16,
                width: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(gen_synthetic_motion_dataset(&spec, 4, 0).is_err());
    }
}
