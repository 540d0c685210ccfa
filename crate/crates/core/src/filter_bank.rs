//! Multichannel convolution operator `W = (W_c)` with zero padding.

use log::warn;
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::conv;
use crate::error::{Error, Result};
use crate::forward_models::LinearOperator;
use crate::linalg::{self, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL, POWER_SEED};

/// Grid on which spectral norms are measured unless told otherwise.
pub const DEFAULT_NORM_GRID: (usize, usize) = (40, 40);
/// Largest grid accepted by the dense diagnostics.
pub const MAX_DENSE_GRID: usize = 16;
const FREQ_GRID: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    kernels: Vec<Array2<f64>>,
    kernel_size: usize,
    spectral_norms: Vec<Option<f64>>,
    flagged: Vec<bool>,
    norm_grid: (usize, usize),
}

/// Per-channel outcome of [`FilterBank::normalize_spectral`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationReport {
    pub norms_before: Vec<f64>,
    pub iterations: Vec<usize>,
    pub zero_channels: Vec<usize>,
}

impl FilterBank {
    pub fn new(kernels: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = kernels.first() else {
            return Err(Error::invalid("filter bank needs at least one channel"));
        };
        let k = first.nrows();
        if k % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
        }
        for kern in &kernels {
            if kern.dim() != (k, k) {
                return Err(Error::shape((k, k), kern.dim()));
            }
            if kern.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("kernel".into()));
            }
        }
        let n = kernels.len();
        Ok(FilterBank {
            kernels: kernels.into_iter().map(|k| k.as_standard_layout().into_owned()).collect(),
            kernel_size: k,
            spectral_norms: vec![None; n],
            flagged: vec![false; n],
            norm_grid: DEFAULT_NORM_GRID,
        })
    }

    /// Single centered Dirac channel of the given size.
    pub fn dirac(kernel_size: usize) -> Result<Self> {
        Self::new(vec![dirac_kernel(kernel_size)])
    }

    /// Deterministic toy bank: the lowest-frequency non-constant 2D DCT atoms,
    /// normalized to unit spectral norm on the default grid.
    pub fn dct(n_channels: usize, kernel_size: usize) -> Result<Self> {
        if n_channels + 1 > kernel_size * kernel_size {
            return Err(Error::invalid("more channels than non-constant DCT atoms"));
        }
        let mut freqs: Vec<(usize, usize)> = (0..kernel_size)
            .flat_map(|u| (0..kernel_size).map(move |v| (u, v)))
            .filter(|&(u, v)| u + v > 0)
            .collect();
        freqs.sort_by_key(|&(u, v)| (u + v, u.max(v), u));
        let n = kernel_size as f64;
        let kernels = freqs[..n_channels]
            .iter()
            .map(|&(u, v)| {
                Array2::from_shape_fn((kernel_size, kernel_size), |(i, j)| {
                    let cu = (std::f64::consts::PI * u as f64 * (i as f64 + 0.5) / n).cos();
                    let cv = (std::f64::consts::PI * v as f64 * (j as f64 + 0.5) / n).cos();
                    cu * cv
                })
            })
            .collect();
        let (bank, _) = Self::new(kernels)?.normalize_spectral(DEFAULT_POWER_TOL, DEFAULT_POWER_ITERS)?;
        Ok(bank)
    }

    pub fn with_norm_grid(mut self, grid: (usize, usize)) -> Self {
        if grid != self.norm_grid {
            self.spectral_norms.iter_mut().for_each(|n| *n = None);
        }
        self.norm_grid = grid;
        self
    }

    pub fn n_channels(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn kernels(&self) -> &[Array2<f64>] {
        &self.kernels
    }

    pub fn kernel(&self, c: usize) -> &Array2<f64> {
        &self.kernels[c]
    }

    pub fn norm_grid(&self) -> (usize, usize) {
        self.norm_grid
    }

    /// Channels left untouched by normalization because their kernel is zero.
    pub fn flagged_channels(&self) -> Vec<usize> {
        self.flagged.iter().enumerate().filter(|(_, f)| **f).map(|(c, _)| c).collect()
    }

    /// Cached spectral norms (available after normalization).
    pub fn spectral_norms(&self) -> &[Option<f64>] {
        &self.spectral_norms
    }

    /// Replaces kernels, keeping channel count and size.
    pub fn with_kernels(&self, kernels: Vec<Array2<f64>>) -> Result<Self> {
        if kernels.len() != self.n_channels() {
            return Err(Error::shape(self.n_channels(), kernels.len()));
        }
        Ok(Self::new(kernels)?.with_norm_grid(self.norm_grid))
    }

    /// Bank with every kernel multiplied by `t`.
    pub fn scaled(&self, t: f64) -> Self {
        let mut out = self.clone();
        out.kernels.iter_mut().for_each(|k| *k *= t);
        out.spectral_norms.iter_mut().for_each(|n| *n = n.map(|v| v * t.abs()));
        out
    }

    fn anchor(&self) -> (usize, usize) {
        (self.kernel_size / 2, self.kernel_size / 2)
    }

    fn check_image(&self, image: &ArrayView2<f64>) -> Result<()> {
        if image.nrows() == 0 || image.ncols() == 0 {
            return Err(Error::invalid("empty image"));
        }
        Ok(())
    }

    /// Adds `W_c x` into `out` (both row-major, same size).
    pub(crate) fn apply_channel_add(&self, c: usize, x: &[f64], dims: (usize, usize), out: &mut [f64]) {
        let k = self.kernel_size;
        conv::correlate_add(x, dims.0, dims.1, self.kernels[c].as_slice().unwrap(), k, k, self.anchor(), out);
    }

    /// Adds `W_c^T u` into `out`.
    pub(crate) fn adjoint_channel_add(&self, c: usize, u: &[f64], dims: (usize, usize), out: &mut [f64]) {
        let k = self.kernel_size;
        conv::correlate_adjoint_add(u, dims.0, dims.1, self.kernels[c].as_slice().unwrap(), k, k, self.anchor(), out);
    }

    /// Filter responses, one channel per kernel, same spatial size as `image`.
    pub fn apply(&self, image: &Array2<f64>) -> Result<Array3<f64>> {
        self.check_image(&image.view())?;
        let x = image.as_standard_layout();
        let dims = image.dim();
        let mut out = Array3::zeros((self.n_channels(), dims.0, dims.1));
        for (c, mut slot) in out.axis_iter_mut(Axis(0)).enumerate() {
            self.apply_channel_add(c, x.as_slice().unwrap(), dims, slot.as_slice_mut().unwrap());
        }
        Ok(out)
    }

    /// `sum_c W_c^T u_c`.
    pub fn apply_adjoint(&self, responses: &Array3<f64>) -> Result<Array2<f64>> {
        let (c, h, w) = responses.dim();
        if c != self.n_channels() {
            return Err(Error::shape(self.n_channels(), c));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("empty response stack"));
        }
        let r = responses.as_standard_layout();
        let mut out = Array2::zeros((h, w));
        for (ch, slot) in r.axis_iter(Axis(0)).enumerate() {
            self.adjoint_channel_add(ch, slot.as_slice().unwrap(), (h, w), out.as_slice_mut().unwrap());
        }
        Ok(out)
    }

    /// Power-iteration estimate of `||W_c||_2` on `grid`.
    pub fn channel_norm(&self, c: usize, grid: (usize, usize), tol: f64, max_iters: usize) -> linalg::PowerEstimate {
        let n = grid.0 * grid.1;
        let mut scratch = vec![0.0; n];
        linalg::power_iteration(n, tol, max_iters, POWER_SEED, |v| {
            scratch.iter_mut().for_each(|s| *s = 0.0);
            self.apply_channel_add(c, v, grid, &mut scratch);
            let mut back = vec![0.0; n];
            self.adjoint_channel_add(c, &scratch, grid, &mut back);
            back
        })
    }

    /// Divides every kernel by its estimated operator norm on the bank's norm grid.
    ///
    /// All-zero kernels are left untouched and flagged.
    pub fn normalize_spectral(&self, tol: f64, max_iters: usize) -> Result<(FilterBank, NormalizationReport)> {
        if !(tol > 0.0) || max_iters == 0 {
            return Err(Error::invalid("power iteration needs tol > 0 and max_iters > 0"));
        }
        let mut out = self.clone();
        let mut report = NormalizationReport {
            norms_before: Vec::with_capacity(self.n_channels()),
            iterations: Vec::with_capacity(self.n_channels()),
            zero_channels: Vec::new(),
        };
        for c in 0..self.n_channels() {
            if self.kernels[c].iter().all(|v| *v == 0.0) {
                warn!("channel {c} has an all-zero kernel; left unnormalized");
                out.flagged[c] = true;
                out.spectral_norms[c] = Some(0.0);
                report.norms_before.push(0.0);
                report.iterations.push(0);
                report.zero_channels.push(c);
                continue;
            }
            let est = self.channel_norm(c, self.norm_grid, tol, max_iters);
            let norm = est.norm();
            out.kernels[c].mapv_inplace(|v| v / norm);
            out.spectral_norms[c] = Some(1.0);
            out.flagged[c] = false;
            report.norms_before.push(norm);
            report.iterations.push(est.iterations);
        }
        Ok((out, report))
    }

    /// Per-channel operator norms: cached values, else a fresh estimate.
    pub fn operator_norms(&self) -> Vec<f64> {
        (0..self.n_channels())
            .map(|c| {
                self.spectral_norms[c].unwrap_or_else(|| {
                    self.channel_norm(c, self.norm_grid, DEFAULT_POWER_TOL, DEFAULT_POWER_ITERS).norm()
                })
            })
            .collect()
    }

    /// Upper bound on `||W_c||_2` valid on every grid.
    ///
    /// Zero-padded correlation is a section of the infinite convolution, whose
    /// norm is the peak of the kernel's frequency response. The peak is taken on
    /// a lattice and widened by half the response's curvature bound times the
    /// squared lattice half-diagonal.
    pub fn channel_norm_bound(&self, c: usize) -> f64 {
        let k = &self.kernels[c];
        let n = self.kernel_size;
        let r = (n / 2) as f64;
        let mut curvature = 0.0;
        for ((i, j), v) in k.indexed_iter() {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            curvature += v.abs() * (di * di + dj * dj);
        }
        let step = 2.0 * std::f64::consts::PI / FREQ_GRID as f64;
        let phase = |w: f64, t: usize| (w * (t as f64 - r)).sin_cos();
        // rows[b][i] = sum_j k[i, j] e^{i wb (j - r)}
        let rows: Vec<Vec<(f64, f64)>> = (0..FREQ_GRID)
            .map(|b| {
                let wb = b as f64 * step;
                (0..n)
                    .map(|i| {
                        (0..n).fold((0.0, 0.0), |(re, im), j| {
                            let (s, co) = phase(wb, j);
                            (re + k[(i, j)] * co, im + k[(i, j)] * s)
                        })
                    })
                    .collect()
            })
            .collect();
        let phases: Vec<Vec<(f64, f64)>> = (0..FREQ_GRID)
            .map(|a| (0..n).map(|i| phase(a as f64 * step, i)).collect())
            .collect();
        let mut peak = 0.0f64;
        for pa in &phases {
            for row in &rows {
                let (mut re, mut im) = (0.0, 0.0);
                for ((s, co), (rr, ri)) in pa.iter().zip(row) {
                    re += co * rr - s * ri;
                    im += co * ri + s * rr;
                }
                peak = peak.max((re * re + im * im).sqrt());
            }
        }
        peak + 0.5 * curvature * 0.5 * step * step
    }

    /// Dense matrix of channel `c` on `grid` (row-major pixel ordering).
    pub fn channel_matrix(&self, c: usize, grid: (usize, usize)) -> nalgebra::DMatrix<f64> {
        let n = grid.0 * grid.1;
        linalg::assemble(n, n, |e| {
            let mut out = vec![0.0; n];
            self.apply_channel_add(c, e, grid, &mut out);
            out
        })
    }

    /// Smallest singular value of the stacked `[W_1; ...; W_C; H]` on `grid`.
    ///
    /// Positive exactly when the kernels of all blocks intersect trivially.
    pub fn kernel_intersection_lower_bound(
        &self,
        operator: Option<&dyn LinearOperator>,
        grid: (usize, usize),
    ) -> Result<f64> {
        if grid.0 > MAX_DENSE_GRID || grid.1 > MAX_DENSE_GRID {
            return Err(Error::SizeLimit(format!(
                "dense diagnostic limited to {MAX_DENSE_GRID}x{MAX_DENSE_GRID}, got {grid:?}"
            )));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::invalid("empty grid"));
        }
        let mut stacked = self.channel_matrix(0, grid);
        for c in 1..self.n_channels() {
            stacked = linalg::vstack(&stacked, &self.channel_matrix(c, grid));
        }
        if let Some(op) = operator {
            if op.shape_in() != grid {
                return Err(Error::shape(grid, op.shape_in()));
            }
            let h = op.dense_matrix();
            stacked = linalg::vstack(&stacked, &h);
        }
        Ok(linalg::smallest_singular_value(&stacked))
    }
}

pub fn dirac_kernel(kernel_size: usize) -> Array2<f64> {
    let mut k = Array2::zeros((kernel_size, kernel_size));
    k[(kernel_size / 2, kernel_size / 2)] = 1.0;
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() - 0.5)
    }

    fn random_bank(rng: &mut ChaCha8Rng, channels: usize, k: usize) -> FilterBank {
        FilterBank::new((0..channels).map(|_| random_image(rng, k, k)).collect()).unwrap()
    }

    #[test]
    fn dirac_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = FilterBank::dirac(3).unwrap();
        let x = random_image(&mut rng, 6, 5);
        let y = bank.apply(&x).unwrap();
        assert_eq!(y.index_axis(Axis(0), 0), x);
        assert_eq!(bank.apply_adjoint(&y).unwrap(), x);
    }

    #[test]
    fn zero_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = random_bank(&mut rng, 3, 5);
        assert!(bank.apply(&Array2::zeros((7, 7))).unwrap().iter().all(|v| *v == 0.0));
        assert!(bank.apply_adjoint(&Array3::zeros((3, 7, 7))).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_assembled_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = random_bank(&mut rng, 1, 3);
        let x = random_image(&mut rng, 6, 6);
        // probe unit vectors independently of channel_matrix
        let mut m = nalgebra::DMatrix::zeros(36, 36);
        for j in 0..36 {
            let mut e = Array2::zeros((6, 6));
            e[(j / 6, j % 6)] = 1.0;
            let col = bank.apply(&e).unwrap();
            for (i, v) in col.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        let dense = &m * nalgebra::DVector::from_iterator(36, x.iter().copied());
        let got = bank.apply(&x).unwrap();
        for (a, b) in got.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dot_product_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = random_bank(&mut rng, 4, 5);
        for _ in 0..20 {
            let x = random_image(&mut rng, 9, 11);
            let u = Array3::from_shape_fn((4, 9, 11), |_| rng.gen::<f64>() - 0.5);
            let lhs = (&bank.apply(&x).unwrap() * &u).sum();
            let back = bank.apply_adjoint(&u).unwrap();
            let rhs = (&x * &back).sum();
            let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt() * u.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = random_bank(&mut rng, 2, 3);
        let x = random_image(&mut rng, 8, 8);
        let z = random_image(&mut rng, 8, 8);
        let (a, b) = (1.7, -0.3);
        let lhs = bank.apply(&(&x * a + &z * b)).unwrap();
        let rhs = bank.apply(&x).unwrap() * a + bank.apply(&z).unwrap() * b;
        for (p, q) in lhs.iter().zip(rhs.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_dirac_normalizes_to_dirac() {
        let bank = FilterBank::new(vec![dirac_kernel(3) * 2.0]).unwrap();
        let (normed, report) = bank.normalize_spectral(1e-8, 500).unwrap();
        assert!((report.norms_before[0] - 2.0).abs() < 1e-12);
        for (a, b) in normed.kernel(0).iter().zip(dirac_kernel(3).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_kernel_has_unit_norm_on_large_grid() {
        // frequency response of a nonnegative kernel summing to one peaks at 1 (DC)
        let avg = Array2::from_elem((3, 3), 1.0 / 9.0);
        let bank = FilterBank::new(vec![avg]).unwrap().with_norm_grid((64, 64));
        let est = bank.channel_norm(0, (64, 64), 1e-10, 5000);
        assert!((est.norm() - 1.0).abs() < 0.01, "{}", est.norm());
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = random_bank(&mut rng, 1, 5).with_norm_grid((32, 32));
        let est = bank.channel_norm(0, (32, 32), DEFAULT_POWER_TOL, DEFAULT_POWER_ITERS);
        let m = bank.channel_matrix(0, (32, 32));
        let svd_max = linalg::largest_singular_value(&m);
        assert!((est.norm() - svd_max).abs() <= 1e-6 * svd_max, "{} vs {}", est.norm(), svd_max);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-8;
        let bank = random_bank(&mut rng, 3, 5).with_norm_grid((24, 24));
        let (once, _) = bank.normalize_spectral(tol, 500).unwrap();
        let (twice, report) = once.normalize_spectral(tol, 500).unwrap();
        for c in 0..3 {
            let diff = (once.kernel(c) - twice.kernel(c)).iter().map(|v| v * v).sum::<f64>().sqrt();
            let size = once.kernel(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff <= 2.0 * tol * size + 1e-12, "channel {c}: {diff}");
            assert!((report.norms_before[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_kernel_is_flagged() {
        let bank = FilterBank::new(vec![Array2::zeros((3, 3)), dirac_kernel(3)]).unwrap();
        let (normed, report) = bank.normalize_spectral(1e-8, 100).unwrap();
        assert_eq!(report.zero_channels, vec![0]);
        assert_eq!(normed.flagged_channels(), vec![0]);
        assert!(normed.kernel(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dirac_channel_forces_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut kernels = vec![dirac_kernel(3)];
        kernels.extend((0..2).map(|_| random_image(&mut rng, 3, 3)));
        let bank = FilterBank::new(kernels).unwrap();
        assert!(bank.kernel_intersection_lower_bound(None, (5, 5)).unwrap() >= 1.0 - 1e-12);
    }

    #[test]
    fn difference_channel_bound_and_duplication() {
        let diff = array![[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]];
        let single = FilterBank::new(vec![diff.clone()]).unwrap();
        let bound = single.kernel_intersection_lower_bound(None, (4, 4)).unwrap();
        // oracle: dense SVD of the explicitly written 16x16 difference matrix
        let mut m = nalgebra::DMatrix::zeros(16, 16);
        for i in 0..4 {
            for j in 0..4 {
                let p = i * 4 + j;
                m[(p, p)] = -1.0;
                if j + 1 < 4 {
                    m[(p, p + 1)] = 1.0;
                }
            }
        }
        let oracle = linalg::smallest_singular_value(&m);
        assert!((bound - oracle).abs() < 1e-12);
        assert!(bound > 0.0, "zero padding makes the forward difference injective");

        let doubled = FilterBank::new(vec![diff.clone(), diff]).unwrap();
        let b2 = doubled.kernel_intersection_lower_bound(None, (4, 4)).unwrap();
        assert!((b2 - bound * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dense_diagnostic_refuses_large_grids() {
        let bank = FilterBank::dirac(3).unwrap();
        assert!(matches!(bank.kernel_intersection_lower_bound(None, (17, 4)), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn dct_bank_has_unit_norms() {
        let bank = FilterBank::dct(8, 5).unwrap();
        assert_eq!(bank.n_channels(), 8);
        for c in 0..8 {
            let est = bank.channel_norm(c, bank.norm_grid(), 1e-10, 2000);
            assert!((est.norm() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_even_or_ragged_kernels() {
        assert!(FilterBank::new(vec![Array2::zeros((4, 4))]).is_err());
        assert!(FilterBank::new(vec![Array2::zeros((3, 3)), Array2::zeros((5, 5))]).is_err());
        assert!(FilterBank::new(vec![]).is_err());
    }

    #[test]
    fn frequency_bound_dominates_grid_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let bank = random_bank(&mut rng, 3, 5);
        for c in 0..3 {
            let bound = bank.channel_norm_bound(c);
            for grid in [(6, 6), (13, 9), (32, 32)] {
                let exact = linalg::largest_singular_value(&bank.channel_matrix(c, grid));
                assert!(exact <= bound, "{exact} > {bound}");
                if grid == (32, 32) {
                    assert!(bound <= 1.05 * exact, "{bound} loose against {exact}");
                }
            }
        }
        assert!((FilterBank::dirac(5).unwrap().channel_norm_bound(0) - 1.0).abs() < 1e-12);
    }
}
