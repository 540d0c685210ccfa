//! Forward operators `H` and data-fidelity terms.

mod blur;
mod fidelity;
mod fourier;
mod radon;
mod simulate;

use std::sync::OnceLock;

use nalgebra::DMatrix;
use ndarray::Array2;

pub use blur::BlurStride;
pub use fidelity::{Fidelity, CT_ATTENUATION, CT_PHOTON_COUNT};
pub use fourier::FourierSubsample;
pub use radon::Radon;
pub use simulate::{simulate_data, NoiseSpec};

use crate::error::{Error, Result};
use crate::linalg::{self, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL, POWER_SEED};

/// A linear map between real 2D grids with an exact adjoint.
pub trait LinearOperator: Send + Sync {
    fn shape_in(&self) -> (usize, usize);
    fn shape_out(&self) -> (usize, usize);

    /// `H x`; implementations may assume `x` has shape [`Self::shape_in`].
    fn apply_unchecked(&self, x: &Array2<f64>) -> Array2<f64>;
    /// `H^T r`; implementations may assume `r` has shape [`Self::shape_out`].
    fn adjoint_unchecked(&self, r: &Array2<f64>) -> Array2<f64>;

    fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.dim() != self.shape_in() {
            return Err(Error::shape(self.shape_in(), x.dim()));
        }
        Ok(self.apply_unchecked(x))
    }

    fn adjoint(&self, r: &Array2<f64>) -> Result<Array2<f64>> {
        if r.dim() != self.shape_out() {
            return Err(Error::shape(self.shape_out(), r.dim()));
        }
        Ok(self.adjoint_unchecked(r))
    }

    /// Estimate of `||H||_2`.
    fn norm_estimate(&self) -> f64 {
        power_norm(self)
    }

    /// Dense matrix over row-major flattened grids.
    fn dense_matrix(&self) -> DMatrix<f64> {
        let (hi, wi) = self.shape_in();
        let (ho, wo) = self.shape_out();
        linalg::assemble(hi * wi, ho * wo, |e| {
            let x = Array2::from_shape_vec((hi, wi), e.to_vec()).unwrap();
            self.apply_unchecked(&x).into_iter().collect()
        })
    }
}

/// Power iteration on `H^T H` from the shared deterministic seed.
pub fn power_norm<O: LinearOperator + ?Sized>(op: &O) -> f64 {
    let (h, w) = op.shape_in();
    linalg::power_iteration(h * w, DEFAULT_POWER_TOL, DEFAULT_POWER_ITERS, POWER_SEED, |v| {
        let x = Array2::from_shape_vec((h, w), v.to_vec()).unwrap();
        op.adjoint_unchecked(&op.apply_unchecked(&x)).into_iter().collect()
    })
    .norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity {
    shape: (usize, usize),
}

impl Identity {
    pub fn new(shape: (usize, usize)) -> Self {
        Identity { shape }
    }
}

impl LinearOperator for Identity {
    fn shape_in(&self) -> (usize, usize) {
        self.shape
    }
    fn shape_out(&self) -> (usize, usize) {
        self.shape
    }
    fn apply_unchecked(&self, x: &Array2<f64>) -> Array2<f64> {
        x.clone()
    }
    fn adjoint_unchecked(&self, r: &Array2<f64>) -> Array2<f64> {
        r.clone()
    }
    fn norm_estimate(&self) -> f64 {
        1.0
    }
}

/// The operator kinds supported by reconstruction problems.
#[derive(Debug, Clone)]
pub enum ForwardOperator {
    Identity(Identity),
    BlurStride(BlurStride),
    FourierSubsample(FourierSubsample),
    Radon(Radon),
}

impl ForwardOperator {
    pub fn identity(shape: (usize, usize)) -> Self {
        ForwardOperator::Identity(Identity::new(shape))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ForwardOperator::Identity(_) => "identity",
            ForwardOperator::BlurStride(_) => "blur_stride",
            ForwardOperator::FourierSubsample(_) => "fourier_subsample",
            ForwardOperator::Radon(_) => "radon",
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ForwardOperator::Identity(_))
    }

    fn inner(&self) -> &dyn LinearOperator {
        match self {
            ForwardOperator::Identity(op) => op,
            ForwardOperator::BlurStride(op) => op,
            ForwardOperator::FourierSubsample(op) => op,
            ForwardOperator::Radon(op) => op,
        }
    }
}

impl LinearOperator for ForwardOperator {
    fn shape_in(&self) -> (usize, usize) {
        self.inner().shape_in()
    }
    fn shape_out(&self) -> (usize, usize) {
        self.inner().shape_out()
    }
    fn apply_unchecked(&self, x: &Array2<f64>) -> Array2<f64> {
        self.inner().apply_unchecked(x)
    }
    fn adjoint_unchecked(&self, r: &Array2<f64>) -> Array2<f64> {
        self.inner().adjoint_unchecked(r)
    }
    fn norm_estimate(&self) -> f64 {
        self.inner().norm_estimate()
    }
    fn dense_matrix(&self) -> DMatrix<f64> {
        self.inner().dense_matrix()
    }
}

/// Lazily computed operator norm shared by the concrete operators.
#[derive(Debug, Clone, Default)]
pub(crate) struct NormCache(OnceLock<f64>);

impl NormCache {
    pub(crate) fn get_or_compute(&self, f: impl FnOnce() -> f64) -> f64 {
        *self.0.get_or_init(f)
    }
}
