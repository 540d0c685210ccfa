use ndarray::Array2;

use super::{LinearOperator, NormCache};
use crate::conv;
use crate::error::{Error, Result};

/// Gaussian blur (zero padding) followed by keeping every `stride`-th row and column.
#[derive(Debug, Clone)]
pub struct BlurStride {
    shape_in: (usize, usize),
    kernel: Array2<f64>,
    stride: usize,
    norm: NormCache,
}

impl BlurStride {
    pub fn new(shape_in: (usize, usize), kernel_size: usize, std: f64, stride: usize) -> Result<Self> {
        if kernel_size == 0 || stride == 0 {
            return Err(Error::invalid("blur kernel size and stride must be positive"));
        }
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::invalid(format!("blur std must be positive, got {std}")));
        }
        if shape_in.0 == 0 || shape_in.1 == 0 {
            return Err(Error::invalid("empty input shape"));
        }
        let c = (kernel_size as f64 - 1.0) / 2.0;
        let mut kernel = Array2::from_shape_fn((kernel_size, kernel_size), |(i, j)| {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            (-(di * di + dj * dj) / (2.0 * std * std)).exp()
        });
        let total = kernel.sum();
        kernel /= total;
        Ok(BlurStride {
            shape_in,
            kernel,
            stride,
            norm: NormCache::default(),
        })
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn anchor(&self) -> (usize, usize) {
        let k = self.kernel.nrows();
        ((k - 1) / 2, (k - 1) / 2)
    }
}

impl LinearOperator for BlurStride {
    fn shape_in(&self) -> (usize, usize) {
        self.shape_in
    }

    fn shape_out(&self) -> (usize, usize) {
        (self.shape_in.0.div_ceil(self.stride), self.shape_in.1.div_ceil(self.stride))
    }

    fn apply_unchecked(&self, x: &Array2<f64>) -> Array2<f64> {
        let (h, w) = self.shape_in;
        let k = self.kernel.nrows();
        let x = x.as_standard_layout();
        let mut blurred = vec![0.0; h * w];
        conv::correlate_add(x.as_slice().unwrap(), h, w, self.kernel.as_slice().unwrap(), k, k, self.anchor(), &mut blurred);
        let (ho, wo) = self.shape_out();
        Array2::from_shape_fn((ho, wo), |(i, j)| blurred[i * self.stride * w + j * self.stride])
    }

    fn adjoint_unchecked(&self, r: &Array2<f64>) -> Array2<f64> {
        let (h, w) = self.shape_in;
        let k = self.kernel.nrows();
        let mut up = vec![0.0; h * w];
        for ((i, j), v) in r.indexed_iter() {
            up[i * self.stride * w + j * self.stride] = *v;
        }
        let mut out = vec![0.0; h * w];
        conv::correlate_adjoint_add(&up, h, w, self.kernel.as_slice().unwrap(), k, k, self.anchor(), &mut out);
        Array2::from_shape_vec((h, w), out).unwrap()
    }

    fn norm_estimate(&self) -> f64 {
        self.norm.get_or_compute(|| super::power_norm(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one_and_shapes() {
        let op = BlurStride::new((362, 362), 16, 2.0, 4).unwrap();
        assert!((op.kernel().sum() - 1.0).abs() < 1e-12);
        assert_eq!(op.shape_out(), (91, 91));
    }

    #[test]
    fn constant_interior_is_preserved() {
        let op = BlurStride::new((20, 20), 5, 1.0, 2).unwrap();
        let y = op.apply(&Array2::from_elem((20, 20), 1.0)).unwrap();
        // away from the zero-padded border the blur of a constant is the constant
        assert!((y[(5, 5)] - 1.0).abs() < 1e-12);
        assert!(y[(0, 0)] < 1.0);
    }
}
