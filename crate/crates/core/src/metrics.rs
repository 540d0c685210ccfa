//! Image quality metrics.

use ndarray::{s, Array2, Zip};

use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(x: &Array2<f64>, reference: &Array2<f64>) -> Result<()> {
    if x.dim() != reference.dim() {
        return Err(Error::shape(reference.dim(), x.dim()));
    }
    if x.is_empty() {
        return Err(Error::invalid("metrics need nonempty images"));
    }
    Ok(())
}

pub fn mse(x: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    check_shapes(x, reference)?;
    Ok(Zip::from(x).and(reference).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)) / x.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `f64::INFINITY` for identical images.
pub fn psnr(x: &Array2<f64>, reference: &Array2<f64>, peak: f64) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let err = mse(x, reference)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

fn gaussian_window() -> Array2<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
        (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total = w.sum();
    w / total
}

/// Mean structural similarity over all fully contained 11x11 Gaussian windows.
pub fn ssim(x: &Array2<f64>, reference: &Array2<f64>, peak: f64) -> Result<f64> {
    check_shapes(x, reference)?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let a = x.slice(s![i..i + SSIM_WINDOW, j..j + SSIM_WINDOW]);
            let b = reference.slice(s![i..i + SSIM_WINDOW, j..j + SSIM_WINDOW]);
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            Zip::from(&win).and(&a).and(&b).for_each(|&g, &p, &q| {
                ma += g * p;
                mb += g * q;
                aa += g * p * p;
                bb += g * q * q;
                ab += g * p * q;
            });
            let va = aa - ma * ma;
            let vb = bb - mb * mb;
            let cov = ab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
