use std::f64::consts::PI;

use ndarray::Array2;

use super::{LinearOperator, NormCache};
use crate::error::{Error, Result};

/// Samples per pixel side along each ray.
const RAY_SAMPLES_PER_PIXEL: f64 = 2.0;

/// Ray-driven parallel-beam Radon transform with bilinear interpolation.
///
/// Angles are equidistant in `[0, pi)`; a limited-angle variant drops a
/// fraction of them, split evenly between the start and the end. Detector
/// bins cover the image diagonal. Line integrals are scaled by `pixel_size`.
#[derive(Debug, Clone)]
pub struct Radon {
    shape: (usize, usize),
    angles: Vec<f64>,
    n_det: usize,
    det_spacing: f64,
    ray_step: f64,
    ray_samples: usize,
    pixel_size: f64,
    norm: NormCache,
}

impl Radon {
    /// `n_det = None` picks the smallest odd count with unit spacing covering
    /// the diagonal.
    pub fn new(
        shape: (usize, usize),
        n_angles: usize,
        n_det: Option<usize>,
        pixel_size: f64,
        missing_fraction: f64,
    ) -> Result<Self> {
        if shape.0 == 0 || shape.1 == 0 || n_angles == 0 {
            return Err(Error::invalid("radon needs a nonempty grid and at least one angle"));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::invalid("pixel size must be positive"));
        }
        if !(0.0..1.0).contains(&missing_fraction) {
            return Err(Error::invalid("missing angle fraction must lie in [0, 1)"));
        }
        let drop_each = ((n_angles as f64 * missing_fraction) / 2.0).round() as usize;
        let angles: Vec<f64> = (drop_each..n_angles - drop_each)
            .map(|k| k as f64 * PI / n_angles as f64)
            .collect();
        if angles.is_empty() {
            return Err(Error::invalid("limited-angle setting removes every angle"));
        }
        let diag = ((shape.0 * shape.0 + shape.1 * shape.1) as f64).sqrt();
        let n_det = match n_det {
            Some(0) => return Err(Error::invalid("detector needs at least one bin")),
            Some(n) => n,
            None => {
                let n = diag.ceil() as usize;
                n + (1 - n % 2)
            }
        };
        let det_spacing = diag / n_det as f64;
        let ray_step = 1.0 / RAY_SAMPLES_PER_PIXEL;
        let ray_samples = (diag / ray_step).ceil() as usize + 1;
        Ok(Radon {
            shape,
            angles,
            n_det,
            det_spacing,
            ray_step,
            ray_samples,
            pixel_size,
            norm: NormCache::default(),
        })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    /// Calls `visit(pixel_index, weight)` for every interpolation weight of
    /// detector bin `det` at angle `theta`.
    #[inline]
    fn for_each_weight(&self, theta: f64, det: usize, mut visit: impl FnMut(usize, f64)) {
        let (h, w) = self.shape;
        let (sin, cos) = theta.sin_cos();
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let s = (det as f64 - (self.n_det as f64 - 1.0) / 2.0) * self.det_spacing;
        let half = (self.ray_samples as f64 - 1.0) / 2.0;
        let scale = self.ray_step * self.pixel_size;
        for m in 0..self.ray_samples {
            let t = (m as f64 - half) * self.ray_step;
            let px = cx + s * cos - t * sin;
            let py = cy + s * sin + t * cos;
            if px <= -1.0 || py <= -1.0 || px >= w as f64 || py >= h as f64 {
                continue;
            }
            let j0 = px.floor();
            let i0 = py.floor();
            let fx = px - j0;
            let fy = py - i0;
            let (j0, i0) = (j0 as isize, i0 as isize);
            for (di, dj, wgt) in [
                (0, 0, (1.0 - fy) * (1.0 - fx)),
                (0, 1, (1.0 - fy) * fx),
                (1, 0, fy * (1.0 - fx)),
                (1, 1, fy * fx),
            ] {
                let (i, j) = (i0 + di, j0 + dj);
                if wgt != 0.0 && i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                    visit(i as usize * w + j as usize, wgt * scale);
                }
            }
        }
    }
}

impl LinearOperator for Radon {
    fn shape_in(&self) -> (usize, usize) {
        self.shape
    }

    fn shape_out(&self) -> (usize, usize) {
        (self.angles.len(), self.n_det)
    }

    fn apply_unchecked(&self, x: &Array2<f64>) -> Array2<f64> {
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Array2::zeros(self.shape_out());
        for (a, &theta) in self.angles.iter().enumerate() {
            for d in 0..self.n_det {
                let mut acc = 0.0;
                self.for_each_weight(theta, d, |p, wgt| acc += wgt * xs[p]);
                out[(a, d)] = acc;
            }
        }
        out
    }

    fn adjoint_unchecked(&self, r: &Array2<f64>) -> Array2<f64> {
        let mut out = vec![0.0; self.shape.0 * self.shape.1];
        for (a, &theta) in self.angles.iter().enumerate() {
            for d in 0..self.n_det {
                let v = r[(a, d)];
                if v != 0.0 {
                    self.for_each_weight(theta, d, |p, wgt| out[p] += wgt * v);
                }
            }
        }
        Array2::from_shape_vec(self.shape, out).unwrap()
    }

    fn norm_estimate(&self) -> f64 {
        self.norm.get_or_compute(|| super::power_norm(self))
    }
}
