//! Full-frame filtering used by the texture and contour targets.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaborBankConfig {
    /// Radians.
    pub orientations: Vec<f64>,
    /// Pixels per cycle.
    pub wavelengths: Vec<f64>,
    /// Envelope scale as a fraction of the wavelength.
    pub sigma_ratio: f64,
    /// Envelope aspect ratio.
    pub gamma: f64,
    /// Phase offset.
    pub psi: f64,
    /// Odd kernel side length.
    pub size: usize,
    pub zero_dc: bool,
}

impl Default for GaborBankConfig {
    fn default() -> Self {
        GaborBankConfig {
            orientations: vec![0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0],
            wavelengths: vec![4.0, 8.0],
            sigma_ratio: 0.5,
            gamma: 0.5,
            psi: 0.0,
            size: 7,
            zero_dc: true,
        }
    }
}

impl GaborBankConfig {
    pub fn num_kernels(&self) -> usize {
        self.orientations.len() * self.wavelengths.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaborKernel {
    pub theta: f64,
    pub wavelength: f64,
    pub size: usize,
    /// Row-major, `weights[row * size + col]`, row is the y axis.
    pub weights: Vec<f64>,
}

impl GaborKernel {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Real Gabor kernels, wavelength-major then orientation.
pub fn build_gabor_bank(cfg: &GaborBankConfig) -> Result<Vec<GaborKernel>> {
    if cfg.size % 2 == 0 {
        return Err(config_err!("Gabor kernel extent {} must be odd", cfg.size));
    }
    if cfg.orientations.is_empty() || cfg.wavelengths.is_empty() {
        return Err(config_err!("Gabor bank needs orientations and wavelengths"));
    }
    if cfg.wavelengths.iter().any(|&l| !(l > 0.0)) || !(cfg.sigma_ratio > 0.0) {
        return Err(config_err!("Gabor wavelengths and envelope must be positive"));
    }
    let r = (cfg.size / 2) as f64;
    let mut bank = Vec::with_capacity(cfg.num_kernels());
    for &lambda in &cfg.wavelengths {
        let sigma = cfg.sigma_ratio * lambda;
        for &theta in &cfg.orientations {
            let (s, c) = theta.sin_cos();
            let mut weights = Vec::with_capacity(cfg.size * cfg.size);
            for row in 0..cfg.size {
                for col in 0..cfg.size {
                    let (x, y) = (col as f64 - r, row as f64 - r);
                    let xr = x * c + y * s;
                    let yr = -x * s + y * c;
                    let env = (-(xr * xr + cfg.gamma * cfg.gamma * yr * yr) / (2.0 * sigma * sigma))
                        .exp();
                    weights.push(env * (2.0 * PI * xr / lambda + cfg.psi).cos());
                }
            }
            if cfg.zero_dc {
                let mean = weights.iter().sum::<f64>() / weights.len() as f64;
                weights.iter_mut().for_each(|w| *w -= mean);
            }
            bank.push(GaborKernel {
                theta,
                wavelength: lambda,
                size: cfg.size,
                weights,
            });
        }
    }
    Ok(bank)
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Same-size correlation of an `h x w` plane with a square kernel, reflect padding.
pub(crate) fn correlate(plane: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..size {
                let sy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..size {
                    let sx = reflect(x as isize + kx as isize - r, w);
                    acc += kernel[ky * size + kx] * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// `h x w x K` channel-last Gabor responses of a grayscale plane.
pub fn gabor_responses(gray: &[f32], h: usize, w: usize, bank: &[GaborKernel]) -> Vec<f32> {
    let plane: Vec<f64> = gray.iter().map(|&v| v as f64).collect();
    let k = bank.len();
    let mut out = vec![0.0f32; h * w * k];
    for (ki, kern) in bank.iter().enumerate() {
        let resp = correlate(&plane, h, w, &kern.weights, kern.size);
        for (i, v) in resp.into_iter().enumerate() {
            out[i * k + ki] = v as f32;
        }
    }
    out
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Sobel gradient magnitude divided by `(max + eps)`; values in `[0, 1]`.
pub fn sobel_magnitude(gray: &[f32], h: usize, w: usize, eps: f64) -> Vec<f32> {
    let plane: Vec<f64> = gray.iter().map(|&v| v as f64).collect();
    let gx = correlate(&plane, h, w, &SOBEL_X, 3);
    let gy = correlate(&plane, h, w, &SOBEL_Y, 3);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().fold(0.0f64, |a, &b| a.max(b));
    mag.iter().map(|&m| (m / (max + eps)) as f32).collect()
}
