use crate::error::{contract_err, Result};
use crate::model::{decoder_forward, encoder_forward_with_taps, Branch, LossOn};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::patching::{patchify_image, sample_random_mask, unpatchify_image, Image, MaskSpec, TokenGrid};
use crate::targets::normalize_tokens;

const MASK_FILL: f32 = 0.5;

/// Rows original / masked / reconstruction, one column per image.
///
/// `predictions[i]` holds the pixel-target rows of image `i` at its masked
/// positions; with `normalized` they are mapped back through each token's
/// own mean and standard deviation.
pub fn reconstruction_grid(
    images: &[Image],
    masks: &[MaskSpec],
    predictions: &[Tensor<f32>],
    patch: usize,
    normalized: bool,
) -> Result<Image> {
    if images.is_empty() || images.len() != masks.len() || images.len() != predictions.len() {
        return Err(contract_err!("need one mask and one prediction per image"));
    }
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let cols = images.len();
    let mut grid = Image::zeros(3 * h, cols * w, c);
    for (i, ((img, mask), pred)) in images.iter().zip(masks).zip(predictions).enumerate() {
        let g = patchify_image(img, patch)?;
        if pred.rows() != mask.masked.len() || pred.cols() != g.tokens.cols() {
            return Err(contract_err!(
                "prediction {:?} for {} masked tokens of width {}",
                pred.shape(),
                mask.masked.len(),
                g.tokens.cols()
            ));
        }
        let stats = normalize_tokens(&g.tokens).1;
        let mut masked = g.tokens.clone();
        let mut recon = g.tokens.clone();
        let d = g.tokens.cols();
        for (r, &j) in mask.masked.iter().enumerate() {
            masked.data_mut()[j * d..(j + 1) * d].fill(MASK_FILL);
            let (mean, std) = stats[j];
            for (o, &p) in recon.data_mut()[j * d..(j + 1) * d].iter_mut().zip(pred.row(r)) {
                *o = if normalized { p * std + mean } else { p };
            }
        }
        for (row, tokens) in [g.tokens.clone(), masked, recon].into_iter().enumerate() {
            let tile = unpatchify_image(&TokenGrid {
                tokens,
                layout: g.layout,
            })?;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        grid.set(row * h + y, i * w + x, ch, tile.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Masks each image, predicts its pixels with the deepest ventral decoder
/// and lays out the comparison grid.
pub fn reconstruct_images(
    store: &ParamStore<f32>,
    branch: &Branch,
    images: &[Image],
    ratio: f64,
    normalized: bool,
    seed: u64,
) -> Result<Image> {
    let last = branch.cfg.num_taps() - 1;
    let mut masks = Vec::with_capacity(images.len());
    let mut preds = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let grid = patchify_image(img, branch.cfg.patch)?;
        let mask = sample_random_mask(grid.tokens.rows(), ratio, seed.wrapping_add(i as u64))?;
        let vis = grid.tokens.gather_rows(&mask.visible)?;
        let mut g = Graph::new();
        let taps = encoder_forward_with_taps(&mut g, store, branch, &vis, &mask.visible, 1, true)?;
        let out = decoder_forward(&mut g, store, branch, last, taps[last], std::slice::from_ref(&mask), LossOn::Masked)?;
        preds.push(g.value(out).clone());
        masks.push(mask);
    }
    reconstruction_grid(images, &masks, &preds, branch.cfg.patch, normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u32) -> Image {
        let data = (0..16 * 16 * 3).map(|i| ((i as u32 * 37 + seed * 11) % 97) as f32 / 96.0).collect();
        Image::new(16, 16, 3, data).unwrap()
    }

    #[test]
    fn no_mask_keeps_original_row() {
        let im = img(1);
        let m = MaskSpec::none(16);
        let g = reconstruction_grid(&[im.clone()], &[m], &[Tensor::zeros(&[0, 48])], 4, true).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(g.get(16 + y, x, 0), im.get(y, x, 0));
                assert_eq!(g.get(y, x, 1), im.get(y, x, 1));
            }
        }
    }

    #[test]
    fn perfect_predictions_restore_original() {
        let im = img(2);
        let m = MaskSpec::from_masked(16, vec![0, 5, 6, 15]).unwrap();
        let tokens = patchify_image(&im, 4).unwrap().tokens;
        let norm = normalize_tokens(&tokens).0.gather_rows(&m.masked).unwrap();
        let a = reconstruction_grid(&[im.clone()], &[m.clone()], &[norm.clone()], 4, true).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!((a.get(32 + y, x, 2) - im.get(y, x, 2)).abs() < 1e-5);
            }
        }
        let b = reconstruction_grid(&[im], &[m], &[norm], 4, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(16, 0, 0), MASK_FILL);
    }
}
