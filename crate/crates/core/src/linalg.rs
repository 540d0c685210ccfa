//! Small dense helpers shared by the diagnostics and the oracles.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POWER_SEED: u64 = 0x5eed_0f_0b;
pub const DEFAULT_POWER_TOL: f64 = 1e-8;
pub const DEFAULT_POWER_ITERS: usize = 500;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a power iteration on a symmetric positive semidefinite map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    /// Largest eigenvalue estimate of the normal operator.
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PowerEstimate {
    /// Operator norm of `A` when the iteration ran on `A^T A`.
    pub fn norm(&self) -> f64 {
        self.eigenvalue.max(0.0).sqrt()
    }
}

/// Power iteration on `normal` (assumed symmetric PSD) seeded from a fixed RNG.
///
/// Stops once the relative change of the Rayleigh quotient falls below `tol`.
pub fn power_iteration<F>(dim: usize, tol: f64, max_iters: usize, seed: u64, mut normal: F) -> PowerEstimate
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut eig = 0.0;
    for it in 1..=max_iters {
        let w = normal(&v);
        let next = dot(&v, &w);
        let wn = norm(&w);
        if wn == 0.0 {
            return PowerEstimate {
                eigenvalue: 0.0,
                iterations: it,
                converged: true,
            };
        }
        v = w.into_iter().map(|x| x / wn).collect();
        let change = (next - eig).abs();
        eig = next;
        if change <= tol * eig.abs() {
            return PowerEstimate {
                eigenvalue: eig,
                iterations: it,
                converged: true,
            };
        }
    }
    PowerEstimate {
        eigenvalue: eig,
        iterations: max_iters,
        converged: false,
    }
}

/// Dense matrix of a linear map, assembled column by column from unit probes.
pub fn assemble<F>(n_in: usize, n_out: usize, mut apply: F) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut m = DMatrix::zeros(n_out, n_in);
    let mut e = vec![0.0; n_in];
    for j in 0..n_in {
        e[j] = 1.0;
        let col = apply(&e);
        debug_assert_eq!(col.len(), n_out);
        for (i, v) in col.into_iter().enumerate() {
            m[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    m
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Smallest singular value of a tall (or square) matrix; 0 for wide ones.
pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() < m.ncols() {
        return 0.0;
    }
    singular_values(m).last().copied().unwrap_or(0.0)
}

pub fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Numerical rank with an absolute singular-value threshold.
pub fn rank(m: &DMatrix<f64>, threshold: f64) -> usize {
    singular_values(m).into_iter().filter(|s| *s > threshold).count()
}

/// Orthonormal basis of the column space, as columns.
pub fn range_basis(m: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let cols: Vec<_> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > threshold)
        .map(|(i, _)| u.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(top.ncols(), bottom.ncols());
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), (top.nrows(), top.ncols())).copy_from(top);
    out.view_mut((top.nrows(), 0), (bottom.nrows(), bottom.ncols())).copy_from(bottom);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_on_diagonal() {
        let diag = [3.0, 1.0, 0.5, 2.0];
        let est = power_iteration(4, 1e-12, 2000, 1, |v| v.iter().zip(diag).map(|(x, d)| x * d).collect());
        assert!((est.eigenvalue - 3.0).abs() < 1e-9);
        assert!(est.converged);
    }

    #[test]
    fn rank_and_range() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        assert_eq!(rank(&m, 1e-10), 2);
        assert_eq!(range_basis(&m, 1e-10).ncols(), 2);
        assert!((smallest_singular_value(&DMatrix::identity(3, 3)) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn assemble_recovers_matrix() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let a = assemble(3, 2, |x| {
            let v = nalgebra::DVector::from_column_slice(x);
            (&m * v).iter().copied().collect()
        });
        assert_eq!(a, m);
    }
}
