//! Targets checked against direct, independently written filter code.

use std::f64::consts::PI;

use bimm::patching::{Clip, Image};
use bimm::targets::{
    build_gabor_bank, contour_target_image, gabor_target_image, motion_target, GaborBankConfig,
    TokenGeometry,
};

/// Explicitly padded copy using mirror-without-edge reflection.
fn pad_reflect(plane: &[f64], h: usize, w: usize, r: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mirror = |i: i64, n: i64| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let sy = mirror(y as i64 - r as i64, h as i64);
            let sx = mirror(x as i64 - r as i64, w as i64);
            out[y * pw + x] = plane[sy * w + sx];
        }
    }
    (out, ph, pw)
}

fn direct_filter(plane: &[f64], h: usize, w: usize, k: &[Vec<f64>]) -> Vec<f64> {
    let size = k.len();
    let r = size / 2;
    let (padded, _, pw) = pad_reflect(plane, h, w, r);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, krow) in k.iter().enumerate() {
                for (j, kv) in krow.iter().enumerate() {
                    acc += kv * padded[(y + i) * pw + x + j];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn gabor_kernel(theta: f64, lambda: f64) -> Vec<Vec<f64>> {
    let (sigma, gamma) = (0.5 * lambda, 0.5);
    let mut k = vec![vec![0.0; 7]; 7];
    let mut sum = 0.0;
    for (row, krow) in k.iter_mut().enumerate() {
        for (col, v) in krow.iter_mut().enumerate() {
            let (x, y) = (col as f64 - 3.0, row as f64 - 3.0);
            let xr = x * theta.cos() + y * theta.sin();
            let yr = -x * theta.sin() + y * theta.cos();
            *v = (-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)).exp()
                * (2.0 * PI * xr / lambda).cos();
            sum += *v;
        }
    }
    for krow in k.iter_mut() {
        for v in krow.iter_mut() {
            *v -= sum / 49.0;
        }
    }
    k
}

#[test]
fn vertical_sinusoid_selects_horizontal_frequency_kernel() {
    let (h, w) = (32, 32);
    let gray: Vec<f64> = (0..h * w)
        .map(|i| 0.5 + 0.5 * (2.0 * PI * (i % w) as f64 / 4.0).sin())
        .collect();
    let img = Image::new(
        h,
        w,
        3,
        gray.iter().flat_map(|&v| [v as f32; 3]).collect(),
    )
    .unwrap();

    let thetas = [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0];
    let lambdas = [4.0, 8.0];
    let mut energies = Vec::new();
    let mut oracle_maps = Vec::new();
    for &l in &lambdas {
        for &t in &thetas {
            let resp = direct_filter(&gray, h, w, &gabor_kernel(t, l));
            energies.push(resp.iter().map(|v| v * v).sum::<f64>());
            oracle_maps.push(resp);
        }
    }
    let best = energies
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(best, 0, "theta=0, lambda=4 must dominate: {energies:?}");

    // the library target agrees with the oracle, channel by channel
    let bank = build_gabor_bank(&GaborBankConfig::default()).unwrap();
    let t = gabor_target_image(&img, &bank, 4).unwrap();
    let mut lib_energy = [0.0f64; 8];
    for tok in 0..64 {
        let (py, px) = (tok / 8, tok % 8);
        for y in 0..4 {
            for x in 0..4 {
                for k in 0..8 {
                    let v = t.row(tok)[(y * 4 + x) * 8 + k] as f64;
                    let o = oracle_maps[k][(py * 4 + y) * w + px * 4 + x];
                    assert!((v - o).abs() < 1e-4, "token {tok} k {k}: {v} vs {o}");
                    lib_energy[k] += v * v;
                }
            }
        }
    }
    let lib_best = (0..8)
        .max_by(|&a, &b| lib_energy[a].partial_cmp(&lib_energy[b]).unwrap())
        .unwrap();
    assert_eq!(lib_best, 0);
}

#[test]
fn step_edge_contour_confined_to_band() {
    let (h, w) = (32, 32);
    for c in [5usize, 16, 27] {
        let gray: Vec<f64> = (0..h * w).map(|i| if i % w >= c { 1.0 } else { 0.0 }).collect();
        let img = Image::new(h, w, 3, gray.iter().flat_map(|&v| [v as f32; 3]).collect()).unwrap();

        let sx = vec![vec![-1.0, 0.0, 1.0], vec![-2.0, 0.0, 2.0], vec![-1.0, 0.0, 1.0]];
        let sy = vec![vec![-1.0, -2.0, -1.0], vec![0.0; 3], vec![1.0, 2.0, 1.0]];
        let gx = direct_filter(&gray, h, w, &sx);
        let gy = direct_filter(&gray, h, w, &sy);
        let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
        let max = mag.iter().cloned().fold(0.0, f64::max);

        let t = contour_target_image(&img, 1e-8, 4).unwrap();
        for tok in 0..64 {
            let (py, px) = (tok / 8, tok % 8);
            for y in 0..4 {
                for x in 0..4 {
                    let col = px * 4 + x;
                    let v = t.row(tok)[y * 4 + x] as f64;
                    let o = mag[(py * 4 + y) * w + col] / (max + 1e-8);
                    assert!((v - o).abs() < 1e-6);
                    if v != 0.0 {
                        assert!((c - 1..=c + 1).contains(&col), "edge {c}: column {col}");
                    }
                }
            }
        }
        let tmax = t.data().iter().cloned().fold(0.0f32, f32::max);
        assert!((tmax - 1.0).abs() < 1e-6);
    }
}

#[test]
fn moving_pixel_gives_two_nonzero_entries_per_cube() {
    let (h, w) = (32, 32);
    let mut f1 = Image::zeros(h, w, 3);
    let mut f2 = Image::zeros(h, w, 3);
    // white pixel at (9, 5) moves to (9, 6); both inside the same 4x4 patch
    for c in 0..3 {
        f1.set(9, 5, c, 1.0);
        f2.set(9, 6, c, 1.0);
    }
    let clip = Clip::from_frames(&[f1, f2]).unwrap();
    let geom = TokenGeometry {
        patch: 4,
        tubelet: 2,
    };
    let m = motion_target(&clip, geom, false).unwrap();
    // oracle: direct per-pixel difference
    let mut expected_nonzero_pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d = (clip.frame(1).get(y, x, 0) - clip.frame(0).get(y, x, 0)).abs();
            if d > 0.0 {
                expected_nonzero_pixels.push((y, x));
            }
        }
    }
    assert_eq!(expected_nonzero_pixels, vec![(9, 5), (9, 6)]);
    let affected = (9 / 4) * 8 + 5 / 4;
    for tok in 0..64 {
        let nonzero_pixels = (0..16)
            .filter(|&px| (0..3).any(|c| m.row(tok)[px * 3 + c] != 0.0))
            .count();
        if tok == affected {
            assert_eq!(nonzero_pixels, 2);
        } else {
            assert_eq!(nonzero_pixels, 0);
        }
    }
    assert!(m.data().iter().all(|&v| v >= 0.0));
}
