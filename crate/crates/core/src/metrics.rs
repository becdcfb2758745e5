//! PSNR and SSIM for images in `[0, 1]`.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), `C1 = 0.01²`, `C2 = 0.03²`,
//! evaluated at every position where the window fits entirely inside the
//! image, per channel, then averaged over positions and channels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// `+∞` for identical inputs.
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    b.ensure_shape(a.shape())?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// `10·log10(1/MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one channel stored as `h×w` row-major.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * src[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    b.ensure_shape(a.shape())?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.channel(c).into_vec();
        let pb: Vec<f64> = b.channel(c).into_vec();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&aa, h, w, &taps);
        let e_bb = filter_valid(&bb, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / a.channels() as f64)
}

pub fn evaluate(a: &Tensor, b: &Tensor) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}
