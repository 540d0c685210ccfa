use std::fmt;
use std::sync::Arc;

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::LinearOperator;
use crate::error::{Error, Result};

/// Unitary 2D DFT restricted to a set of k-space columns.
///
/// Output rows are k-space rows; each kept column contributes a real and an
/// imaginary entry, interleaved: `out[r, 2q] = Re`, `out[r, 2q + 1] = Im`.
#[derive(Clone)]
pub struct FourierSubsample {
    shape: (usize, usize),
    columns: Vec<usize>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FourierSubsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FourierSubsample")
            .field("shape", &self.shape)
            .field("columns", &self.columns)
            .finish()
    }
}

impl FourierSubsample {
    /// Keeps the given k-space columns (unshifted indices, DC at 0).
    pub fn new(shape: (usize, usize), mut columns: Vec<usize>) -> Result<Self> {
        let (h, w) = shape;
        if h == 0 || w == 0 {
            return Err(Error::invalid("empty input shape"));
        }
        columns.sort_unstable();
        columns.dedup();
        if columns.is_empty() {
            return Err(Error::invalid("fourier mask keeps no columns"));
        }
        if let Some(bad) = columns.iter().find(|c| **c >= w) {
            return Err(Error::invalid(format!("column {bad} outside width {w}")));
        }
        if columns[0] != 0 {
            warn!("fourier mask does not cover the zero frequency");
        }
        let mut planner = FftPlanner::new();
        Ok(FourierSubsample {
            shape,
            columns,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        })
    }

    /// Keeps `1/acceleration` of the columns: a fully sampled band of
    /// `center_fraction * width` low frequencies plus equally spaced columns
    /// (seeded offset) from the rest.
    pub fn with_acceleration(shape: (usize, usize), acceleration: usize, center_fraction: f64, seed: u64) -> Result<Self> {
        let w = shape.1;
        if acceleration == 0 {
            return Err(Error::invalid("acceleration must be positive"));
        }
        if !(0.0..=1.0).contains(&center_fraction) {
            return Err(Error::invalid("center fraction must lie in [0, 1]"));
        }
        let total = ((w as f64 / acceleration as f64).round() as usize).clamp(1, w);
        let center = ((w as f64 * center_fraction).round() as usize).clamp(1, total);
        let half = center / 2;
        let mut columns: Vec<usize> = (0..center).map(|k| (k + w - half) % w).collect();
        let rest: Vec<usize> = (0..w).filter(|c| !columns.contains(c)).collect();
        let extra = total - center;
        if extra > 0 && !rest.is_empty() {
            let step = rest.len() as f64 / extra as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let offset = rng.gen::<f64>() * step;
            for q in 0..extra {
                let idx = ((offset + q as f64 * step) as usize).min(rest.len() - 1);
                columns.push(rest[idx]);
            }
        }
        Self::new(shape, columns)
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    fn fft2(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = self.shape;
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for r in data.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                column[i] = data[i * w + j];
            }
            col.process(&mut column);
            for i in 0..h {
                data[i * w + j] = column[i];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

impl LinearOperator for FourierSubsample {
    fn shape_in(&self) -> (usize, usize) {
        self.shape
    }

    fn shape_out(&self) -> (usize, usize) {
        (self.shape.0, 2 * self.columns.len())
    }

    fn apply_unchecked(&self, x: &Array2<f64>) -> Array2<f64> {
        let (h, w) = self.shape;
        let mut data: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        self.fft2(&mut data, false);
        let mut out = Array2::zeros(self.shape_out());
        for i in 0..h {
            for (q, &c) in self.columns.iter().enumerate() {
                let v = data[i * w + c];
                out[(i, 2 * q)] = v.re;
                out[(i, 2 * q + 1)] = v.im;
            }
        }
        out
    }

    fn adjoint_unchecked(&self, r: &Array2<f64>) -> Array2<f64> {
        let (h, w) = self.shape;
        let mut data = vec![Complex64::new(0.0, 0.0); h * w];
        for i in 0..h {
            for (q, &c) in self.columns.iter().enumerate() {
                data[i * w + c] = Complex64::new(r[(i, 2 * q)], r[(i, 2 * q + 1)]);
            }
        }
        self.fft2(&mut data, true);
        Array2::from_shape_vec((h, w), data.into_iter().map(|v| v.re).collect()).unwrap()
    }

    /// Rows of a unitary map: the norm is exactly one.
    fn norm_estimate(&self) -> f64 {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceleration_keeps_expected_columns() {
        let op = FourierSubsample::with_acceleration((32, 64), 4, 0.08, 1).unwrap();
        assert_eq!(op.columns().len(), 16);
        assert!(op.columns().contains(&0));
        assert!(op.columns().contains(&63));
        assert_eq!(op.shape_out(), (32, 32));
    }

    #[test]
    fn full_sampling_is_an_isometry() {
        let op = FourierSubsample::new((6, 8), (0..8).collect()).unwrap();
        let x = Array2::from_shape_fn((6, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 2.0);
        let y = op.apply(&x).unwrap();
        let nx = x.iter().map(|v| v * v).sum::<f64>();
        let ny = y.iter().map(|v| v * v).sum::<f64>();
        assert!((nx - ny).abs() < 1e-10 * nx);
        let back = op.adjoint(&y).unwrap();
        assert!(back.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn dc_coefficient_is_scaled_mean() {
        let op = FourierSubsample::new((4, 4), vec![0]).unwrap();
        let y = op.apply(&Array2::from_elem((4, 4), 1.0)).unwrap();
        assert!((y[(0, 0)] - 4.0).abs() < 1e-12);
        assert!(y[(0, 1)].abs() < 1e-12);
        assert!(y[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_masks() {
        assert!(FourierSubsample::new((4, 4), vec![]).is_err());
        assert!(FourierSubsample::new((4, 4), vec![4]).is_err());
        // a mask without the zero frequency is allowed
        assert!(FourierSubsample::new((4, 4), vec![1, 2]).is_ok());
    }
}
