use crate::error::{config_err, Result};
use crate::numerics::{Scalar, Tensor};

/// Fixed sine/cosine codes for every position of a grid, `(N, width)`.
///
/// Each grid axis receives its own band of `[sin(pos * w_i) .., cos(pos * w_i) ..]`
/// with `w_i = 10000^(-i / n)`; the bands are concatenated slowest axis first.
/// `width / 2` frequency pairs are split across axes as evenly as possible,
/// earlier axes taking the remainder.
pub fn sincos_pos_embed<S: Scalar>(grid: &[usize], width: usize) -> Result<Tensor<S>> {
    let axes = grid.len();
    if axes == 0 {
        return Err(config_err!("positional grid needs at least one axis"));
    }
    if width % 2 != 0 || width < 2 * axes {
        return Err(config_err!(
            "embedding width {width} cannot hold {axes} sine/cosine bands"
        ));
    }
    let pairs = width / 2;
    let per_axis: Vec<usize> = (0..axes)
        .map(|a| pairs / axes + usize::from(a < pairs % axes))
        .collect();
    let n: usize = grid.iter().product();
    let mut out = Vec::with_capacity(n * width);
    let mut coord = vec![0usize; axes];
    for idx in 0..n {
        let mut rem = idx;
        for a in (0..axes).rev() {
            coord[a] = rem % grid[a];
            rem /= grid[a];
        }
        for a in 0..axes {
            let k = per_axis[a];
            let pos = coord[a] as f64;
            let freqs = (0..k).map(|i| 10000f64.powf(-(i as f64) / k as f64));
            out.extend(freqs.clone().map(|w| S::of((pos * w).sin())));
            out.extend(freqs.map(|w| S::of((pos * w).cos())));
        }
    }
    Tensor::new(vec![n, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin0_cos1() {
        let e = sincos_pos_embed::<f64>(&[4, 4], 16).unwrap();
        let row = e.row(0);
        for band in row.chunks(8) {
            assert!(band[..4].iter().all(|&v| v == 0.0));
            assert!(band[4..].iter().all(|&v| v == 1.0));
        }
        let v = sincos_pos_embed::<f64>(&[2, 4, 4], 96).unwrap();
        assert_eq!(v.shape(), &[32, 96]);
        for band in v.row(0).chunks(32) {
            assert!(band[..16].iter().all(|&x| x == 0.0));
            assert!(band[16..].iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn distinct_rows_on_8x8() {
        let e = sincos_pos_embed::<f64>(&[8, 8], 32).unwrap();
        for i in 0..64 {
            for j in i + 1..64 {
                let d: f64 = e
                    .row(i)
                    .iter()
                    .zip(e.row(j))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(d > 1e-6, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn deterministic_and_uneven_split() {
        let a = sincos_pos_embed::<f32>(&[4, 8, 8], 32).unwrap();
        assert_eq!(a, sincos_pos_embed::<f32>(&[4, 8, 8], 32).unwrap());
        assert_eq!(a.shape(), &[256, 32]);
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(sincos_pos_embed::<f32>(&[8, 8], 15).is_err());
        assert!(sincos_pos_embed::<f32>(&[2, 8, 8], 4).is_err());
        assert!(sincos_pos_embed::<f32>(&[], 8).is_err());
    }
}
