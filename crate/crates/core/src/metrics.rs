//! Image quality metrics.

use crate::error::{Error, Result};
use crate::raster::Image;

pub const PSNR_CAP: f64 = 99.0;

fn same_shape(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "mse")?;
    // Neumaier summation keeps the mean of many equal errors exact.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let e = (x - y) * (x - y);
        let t = sum + e;
        comp += if sum.abs() >= e { (sum - t) + e } else { (e - t) + sum };
        sum = t;
    }
    Ok((sum + comp) / a.data().len() as f64)
}

/// `20 log10(1 / RMSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    // Through the RMSE so that a uniform error of 0.1 lands on 20 dB exactly.
    (-20.0 * mse.sqrt().log10()).min(PSNR_CAP)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut t: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let x = i as f64 - half;
        (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable 'valid' filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes over every fully
/// covered 11x11 Gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let (x, y) = (a.luma(), b.luma());
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &taps);
    let my = filter_valid(&y, w, h, &taps);
    let sxx = filter_valid(&prod(&x, &x), w, h, &taps);
    let syy = filter_valid(&prod(&y, &y), w, h, &taps);
    let sxy = filter_valid(&prod(&x, &y), w, h, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}
