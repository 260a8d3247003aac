//! Token grids for images and clips, random and tube masking, and fixed
//! sine/cosine positional codes.
//!
//! Token order is normative: images are row-major (top-left first), clips are
//! time-major then row-major. Each token flattens its block channel-last,
//! i.e. `(t, y, x, c)` with `c` fastest.

mod mask;
mod media;
mod pos;

pub use mask::{
    gather_visible, round_half_up, sample_random_mask, sample_tube_mask, MaskConfig, MaskSpec,
    MaskStrategy,
};
pub use media::{Clip, ClipSpec, Image};
pub use pos::sincos_pos_embed;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// How a token grid maps back onto pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridLayout {
    Image {
        gh: usize,
        gw: usize,
        patch: usize,
        channels: usize,
    },
    Video {
        gt: usize,
        gh: usize,
        gw: usize,
        tubelet: usize,
        patch: usize,
        channels: usize,
    },
}

impl GridLayout {
    pub fn num_tokens(&self) -> usize {
        match *self {
            GridLayout::Image { gh, gw, .. } => gh * gw,
            GridLayout::Video { gt, gh, gw, .. } => gt * gh * gw,
        }
    }

    pub fn token_dim(&self) -> usize {
        match *self {
            GridLayout::Image { patch, channels, .. } => patch * patch * channels,
            GridLayout::Video {
                tubelet,
                patch,
                channels,
                ..
            } => tubelet * patch * patch * channels,
        }
    }

    /// Grid extents, slowest axis first.
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            GridLayout::Image { gh, gw, .. } => vec![gh, gw],
            GridLayout::Video { gt, gh, gw, .. } => vec![gt, gh, gw],
        }
    }

    pub fn spatial_tokens(&self) -> usize {
        match *self {
            GridLayout::Image { gh, gw, .. } | GridLayout::Video { gh, gw, .. } => gh * gw,
        }
    }

    pub fn temporal_cubes(&self) -> usize {
        match *self {
            GridLayout::Image { .. } => 1,
            GridLayout::Video { gt, .. } => gt,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor<f32>,
    pub layout: GridLayout,
}

/// Splits an `h x w x c` channel-last buffer into `p x p` patch rows.
pub fn patchify_hwc(data: &[f32], h: usize, w: usize, c: usize, p: usize) -> Result<Vec<f32>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("{h}x{w} is not divisible into {p}x{p} patches"));
    }
    if data.len() != h * w * c {
        return Err(shape_err!("buffer of {} values is not {h}x{w}x{c}", data.len()));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(data.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * c;
                out.extend_from_slice(&data[start..start + p * c]);
            }
        }
    }
    Ok(out)
}

fn unpatchify_hwc(tokens: &[f32], h: usize, w: usize, c: usize, p: usize) -> Vec<f32> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; h * w * c];
    let tok_dim = p * p * c;
    for py in 0..gh {
        for px in 0..gw {
            let tok = &tokens[(py * gw + px) * tok_dim..][..tok_dim];
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * c;
                out[start..start + p * c].copy_from_slice(&tok[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    out
}

/// Splits a `t x h x w x c` buffer into `ct x p x p` cube rows.
pub fn cubify_thwc(
    data: &[f32],
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    ct: usize,
    p: usize,
) -> Result<Vec<f32>> {
    if ct == 0 || t % ct != 0 {
        return Err(shape_err!("{t} frames are not divisible into tubelets of {ct}"));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("{h}x{w} is not divisible into {p}x{p} patches"));
    }
    if data.len() != t * h * w * c {
        return Err(shape_err!("buffer of {} values is not {t}x{h}x{w}x{c}", data.len()));
    }
    let (gt, gh, gw) = (t / ct, h / p, w / p);
    let frame = h * w * c;
    let mut out = Vec::with_capacity(data.len());
    for qt in 0..gt {
        for py in 0..gh {
            for px in 0..gw {
                for dt in 0..ct {
                    let f = (qt * ct + dt) * frame;
                    for y in 0..p {
                        let start = f + ((py * p + y) * w + px * p) * c;
                        out.extend_from_slice(&data[start..start + p * c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn uncubify_thwc(
    tokens: &[f32],
    (t, h, w, c): (usize, usize, usize, usize),
    ct: usize,
    p: usize,
) -> Vec<f32> {
    let (gt, gh, gw) = (t / ct, h / p, w / p);
    let frame = h * w * c;
    let tok_dim = ct * p * p * c;
    let mut out = vec![0.0; t * frame];
    for qt in 0..gt {
        for py in 0..gh {
            for px in 0..gw {
                let tok = &tokens[((qt * gh + py) * gw + px) * tok_dim..][..tok_dim];
                let mut k = 0;
                for dt in 0..ct {
                    let f = (qt * ct + dt) * frame;
                    for y in 0..p {
                        let start = f + ((py * p + y) * w + px * p) * c;
                        out[start..start + p * c].copy_from_slice(&tok[k..k + p * c]);
                        k += p * c;
                    }
                }
            }
        }
    }
    out
}

pub fn patchify_image(image: &Image, patch: usize) -> Result<TokenGrid> {
    let data = patchify_hwc(&image.data, image.height, image.width, image.channels, patch)?;
    let layout = GridLayout::Image {
        gh: image.height / patch,
        gw: image.width / patch,
        patch,
        channels: image.channels,
    };
    let tokens = Tensor::new(vec![layout.num_tokens(), layout.token_dim()], data)?;
    Ok(TokenGrid { tokens, layout })
}

pub fn unpatchify_image(grid: &TokenGrid) -> Result<Image> {
    let GridLayout::Image {
        gh,
        gw,
        patch,
        channels,
    } = grid.layout
    else {
        return Err(shape_err!("unpatchify_image needs an image grid"));
    };
    if grid.tokens.shape() != [gh * gw, patch * patch * channels] {
        return Err(shape_err!(
            "token tensor {:?} inconsistent with grid",
            grid.tokens.shape()
        ));
    }
    let (h, w) = (gh * patch, gw * patch);
    let data = unpatchify_hwc(grid.tokens.data(), h, w, channels, patch);
    Image::new(h, w, channels, data)
}

pub fn cubify_clip(clip: &Clip, tubelet: usize, patch: usize) -> Result<TokenGrid> {
    let data = cubify_thwc(
        &clip.data,
        clip.frames,
        clip.height,
        clip.width,
        clip.channels,
        tubelet,
        patch,
    )?;
    let layout = GridLayout::Video {
        gt: clip.frames / tubelet,
        gh: clip.height / patch,
        gw: clip.width / patch,
        tubelet,
        patch,
        channels: clip.channels,
    };
    let tokens = Tensor::new(vec![layout.num_tokens(), layout.token_dim()], data)?;
    Ok(TokenGrid { tokens, layout })
}

pub fn uncubify_clip(grid: &TokenGrid) -> Result<Clip> {
    let GridLayout::Video {
        gt,
        gh,
        gw,
        tubelet,
        patch,
        channels,
    } = grid.layout
    else {
        return Err(shape_err!("uncubify_clip needs a video grid"));
    };
    if grid.tokens.shape() != [grid.layout.num_tokens(), grid.layout.token_dim()] {
        return Err(shape_err!(
            "token tensor {:?} inconsistent with grid",
            grid.tokens.shape()
        ));
    }
    let dims = (gt * tubelet, gh * patch, gw * patch, channels);
    let data = uncubify_thwc(grid.tokens.data(), dims, tubelet, patch);
    Clip::new(dims.0, dims.1, dims.2, dims.3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_image(h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c).map(|i| i as f32 / (h * w * c) as f32).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn patchify_shapes() {
        let g = patchify_image(&ramp_image(32, 32, 3), 4).unwrap();
        assert_eq!(g.tokens.shape(), &[64, 48]);
        let g = patchify_image(&ramp_image(16, 16, 3), 16).unwrap();
        assert_eq!(g.tokens.shape(), &[1, 768]);
        assert!(patchify_image(&ramp_image(10, 12, 3), 4).is_err());
    }

    #[test]
    fn patch_order_and_channel_last() {
        let img = ramp_image(8, 8, 2);
        let g = patchify_image(&img, 4).unwrap();
        // token 1 is the top-right patch; its first entry is pixel (0, 4), channel 0
        assert_eq!(g.tokens.row(1)[0], img.get(0, 4, 0));
        assert_eq!(g.tokens.row(1)[1], img.get(0, 4, 1));
        assert_eq!(g.tokens.row(2)[0], img.get(4, 0, 0));
        // second pixel row of token 0 starts after p*c entries
        assert_eq!(g.tokens.row(0)[8], img.get(1, 0, 0));
    }

    #[test]
    fn unpatchify_zero_and_locality() {
        let mut g = patchify_image(&Image::zeros(8, 8, 3), 4).unwrap();
        assert!(unpatchify_image(&g).unwrap().data.iter().all(|&v| v == 0.0));
        let d = g.tokens.cols();
        g.tokens.data_mut()[3 * d + 5] = 1.0;
        let img = unpatchify_image(&g).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    if !(y >= 4 && x >= 4) {
                        assert_eq!(img.get(y, x, c), 0.0);
                    }
                }
            }
        }
        assert_eq!(img.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn cubify_shapes_and_static_repetition() {
        let frame = ramp_image(32, 32, 3);
        let clip = Clip::from_frames(&vec![frame.clone(); 8]).unwrap();
        let g = cubify_clip(&clip, 2, 4).unwrap();
        assert_eq!(g.tokens.shape(), &[256, 96]);
        let pg = patchify_image(&frame, 4).unwrap();
        for tok in 0..256 {
            let spatial = tok % 64;
            let row = g.tokens.row(tok);
            assert_eq!(&row[..48], pg.tokens.row(spatial));
            assert_eq!(&row[48..], pg.tokens.row(spatial));
        }
        assert!(cubify_clip(&clip, 3, 4).is_err());
    }

    proptest! {
        #[test]
        fn patch_round_trip(gh in 1usize..4, gw in 1usize..4, p in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (gh * p, gw * p);
            let data: Vec<f32> = (0..h * w * c).map(|i| ((i as u64 * 2654435761 + seed) % 997) as f32).collect();
            let img = Image::new(h, w, c, data).unwrap();
            let back = unpatchify_image(&patchify_image(&img, p).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn cube_round_trip(gt in 1usize..3, ct in 1usize..3, gh in 1usize..3, p in 1usize..4, c in 1usize..3, seed in 0u64..1000) {
            let (t, h, w) = (gt * ct, gh * p, (gh + 1) * p);
            let data: Vec<f32> = (0..t * h * w * c).map(|i| ((i as u64 * 40503 + seed) % 991) as f32).collect();
            let clip = Clip::new(t, h, w, c, data).unwrap();
            let back = uncubify_clip(&cubify_clip(&clip, ct, p).unwrap()).unwrap();
            prop_assert_eq!(back, clip);
        }
    }
}
