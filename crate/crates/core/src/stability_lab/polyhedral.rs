//! Hoffman error bounds for polyhedra `{x : E x = b, F x <= q}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;

pub const MAX_VARIABLES: usize = 12;
pub const MAX_ROWS: usize = 24;
/// Singular values at or below this count as zero in rank tests.
pub const RANK_THRESHOLD: f64 = 1e-10;
const FEASIBILITY_TOL: f64 = 1e-9;
const CONE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PolyhedralSystem {
    e: DMatrix<f64>,
    f: DMatrix<f64>,
    b: DVector<f64>,
    q: DVector<f64>,
}

fn check_sizes(e: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<()> {
    let n = e.ncols().max(f.ncols());
    if e.nrows() > 0 && f.nrows() > 0 && e.ncols() != f.ncols() {
        return Err(Error::shape(e.ncols(), f.ncols()));
    }
    if n > MAX_VARIABLES || e.nrows() + f.nrows() > MAX_ROWS {
        return Err(Error::SizeLimit(format!(
            "polyhedral tools accept n <= {MAX_VARIABLES} and at most {MAX_ROWS} rows, got n = {n} with {} rows",
            e.nrows() + f.nrows()
        )));
    }
    Ok(())
}

impl PolyhedralSystem {
    pub fn new(e: DMatrix<f64>, b: DVector<f64>, f: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        check_sizes(&e, &f)?;
        if e.ncols() != f.ncols() {
            return Err(Error::shape(e.ncols(), f.ncols()));
        }
        if b.len() != e.nrows() {
            return Err(Error::shape(e.nrows(), b.len()));
        }
        if q.len() != f.nrows() {
            return Err(Error::shape(f.nrows(), q.len()));
        }
        if e.iter().chain(f.iter()).chain(b.iter()).chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polyhedral system".into()));
        }
        Ok(PolyhedralSystem { e, f, b, q })
    }

    pub fn dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    /// `(E x - b, (F x - q)_+)` stacked.
    pub fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(self.dim(), x.len()));
        }
        let eq = &self.e * x - &self.b;
        let ineq = (&self.f * x - &self.q).map(|v| v.max(0.0));
        Ok(DVector::from_iterator(eq.len() + ineq.len(), eq.iter().chain(ineq.iter()).copied()))
    }

    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        let scale = 1.0 + x.amax();
        Ok(self.residual(x)?.amax() <= FEASIBILITY_TOL * scale)
    }
}

fn rows_of(f: &DMatrix<f64>, j: &[usize]) -> DMatrix<f64> {
    linalg::select_rows(f, j)
}

fn qualifies(e: &DMatrix<f64>, rank_e: usize, f: &DMatrix<f64>, j: &[usize]) -> bool {
    let fj = rows_of(f, j);
    if linalg::rank(&fj, RANK_THRESHOLD) != j.len() {
        return false;
    }
    let stacked = if e.nrows() == 0 { fj } else { linalg::vstack(e, &fj) };
    linalg::rank(&stacked, RANK_THRESHOLD) == rank_e + j.len()
}

/// All row subsets `J` of `F` with `rank(F_J) = |J|` whose row space meets
/// the row space of `E` only at zero. Sorted by size, then lexicographically.
pub fn feasible_subsets(e: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<Vec<Vec<usize>>> {
    check_sizes(e, f)?;
    let rank_e = linalg::rank(e, RANK_THRESHOLD);
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    // failing sets only have failing supersets, so grow qualifying sets only
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for j in &frontier {
            let start = j.last().map_or(0, |l| l + 1);
            for r in start..f.nrows() {
                let mut cand = j.clone();
                cand.push(r);
                if qualifies(e, rank_e, f, &cand) {
                    next.push(cand);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    Ok(out)
}

/// `[E^T Q, F_J^T]` where the columns of `Q` span `range(E)`.
fn cone_matrix(e: &DMatrix<f64>, fj: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, usize) {
    let basis = linalg::range_basis(e, RANK_THRESHOLD);
    let eq = if e.nrows() == 0 { DMatrix::zeros(n, 0) } else { e.transpose() * basis };
    let r = eq.ncols();
    let mut m = DMatrix::zeros(n, r + fj.nrows());
    m.view_mut((0, 0), (n, r)).copy_from(&eq);
    if fj.nrows() > 0 {
        m.view_mut((0, r), (n, fj.nrows())).copy_from(&fj.transpose());
    }
    (m, r)
}

/// `min ||E^T u + F_J^T v||` over `u in range(E)`, `v >= 0`, `||(u, v)|| = 1`.
///
/// Every local minimizer on the sphere is an eigenvector of the Gram matrix
/// restricted to the components not pinned at zero, so the minimum is the
/// least eigenvalue among sign-feasible eigenvectors over all faces.
/// Returns infinity when the feasible set is empty (no variables).
pub fn hoffman_inner_minimum(e: &DMatrix<f64>, fj: &DMatrix<f64>) -> f64 {
    let n = e.ncols().max(fj.ncols());
    let (m, r) = cone_matrix(e, fj, n);
    let k = fj.nrows();
    if r + k == 0 {
        return f64::INFINITY;
    }
    let gram = m.transpose() * &m;
    let mut best = f64::INFINITY;
    for free in 0u32..(1 << k) {
        let idx: Vec<usize> = (0..r).chain((0..k).filter(|i| free & (1 << i) != 0).map(|i| r + i)).collect();
        if idx.is_empty() {
            continue;
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| gram[(idx[a], idx[b])]);
        let eig = SymmetricEigen::new(sub);
        for (col, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda >= best {
                continue;
            }
            let w = eig.eigenvectors.column(col);
            let cone: Vec<f64> = idx.iter().enumerate().filter(|(_, &g)| g >= r).map(|(a, _)| w[a]).collect();
            let sign = if cone.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            if cone.iter().all(|v| sign * v >= -CONE_TOL) {
                best = lambda;
            }
        }
    }
    best.max(0.0).sqrt()
}

/// `K(E, F)`: the largest reciprocal inner minimum over all feasible subsets.
pub fn hoffman_constant(e: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<f64> {
    let subsets = feasible_subsets(e, f)?;
    let k = subsets
        .par_iter()
        .map(|j| 1.0 / hoffman_inner_minimum(e, &rows_of(f, j)))
        .reduce(|| 0.0, f64::max);
    if k == 0.0 || !k.is_finite() {
        return Err(Error::invalid("degenerate system: no constraint contributes to the Hoffman constant"));
    }
    Ok(k)
}

/// Quasi-random estimate of [`hoffman_inner_minimum`]: Halton points mapped
/// to Gaussian directions, folded onto the cone `v >= 0` and normalized.
pub fn sampled_inner_minimum(e: &DMatrix<f64>, fj: &DMatrix<f64>, n_points: usize, seed: u64) -> f64 {
    let n = e.ncols().max(fj.ncols());
    let (m, r) = cone_matrix(e, fj, n);
    let d = m.ncols();
    if d == 0 {
        return f64::INFINITY;
    }
    const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    assert!(d <= PRIMES.len(), "sampling oracle supports at most {} dimensions", PRIMES.len());
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
    (1..=n_points as u64)
        .into_par_iter()
        .map(|i| {
            let mut w = DVector::zeros(d);
            for a in 0..d {
                let u = (halton(i, PRIMES[a]) + shift[a]).fract().clamp(1e-12, 1.0 - 1e-12);
                let g = normal.inverse_cdf(u);
                w[a] = if a >= r { g.abs() } else { g };
            }
            let norm = w.norm();
            if norm == 0.0 {
                return f64::INFINITY;
            }
            (&m * w).norm() / norm
        })
        .reduce(|| f64::INFINITY, f64::min)
}

fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut out = 0.0;
    while i > 0 {
        f /= base as f64;
        out += f * (i % base) as f64;
        i /= base;
    }
    out
}

fn subsets_up_to(m: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::<usize>::new()];
    for _ in 0..max_size.min(m) {
        let mut next = Vec::new();
        for s in &frontier {
            for r in s.last().map_or(0, |l| l + 1)..m {
                let mut c = s.clone();
                c.push(r);
                next.push(c);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Euclidean projection onto the polyhedron.
///
/// The projection is the projection onto the affine hull of some set of at
/// most `n` active inequalities; all such sets are tried and the nearest
/// feasible candidate is kept.
pub fn project_onto_polyhedron(system: &PolyhedralSystem, x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = system.dim();
    if x.len() != n {
        return Err(Error::shape(n, x.len()));
    }
    let candidates = subsets_up_to(system.f.nrows(), n);
    let best = candidates
        .par_iter()
        .filter_map(|active| {
            let c = linalg::vstack(&system.e, &rows_of(&system.f, active));
            let d = DVector::from_iterator(
                c.nrows(),
                system.b.iter().copied().chain(active.iter().map(|&r| system.q[r])),
            );
            let z = if c.nrows() == 0 {
                x.clone()
            } else {
                let pinv = c.clone().pseudo_inverse(RANK_THRESHOLD).ok()?;
                x - pinv * (&c * x - &d)
            };
            let scale = 1.0 + z.amax() + d.amax();
            if c.nrows() > 0 && (&c * &z - &d).amax() > FEASIBILITY_TOL * scale {
                return None;
            }
            if (&system.f * &z - &system.q).iter().any(|v| *v > FEASIBILITY_TOL * scale) {
                return None;
            }
            Some(((&z - x).norm(), z))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    best.map(|(_, z)| z).ok_or_else(|| Error::invalid("polyhedron is empty"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoffmanCheck {
    pub constant: f64,
    pub residual_norm: f64,
    /// `K(E, F) * ||(E x - b, (F x - q)_+)||`.
    pub bound: f64,
    pub distance: f64,
    pub projection: DVector<f64>,
}

impl HoffmanCheck {
    pub fn holds(&self) -> bool {
        self.distance <= self.bound * (1.0 + 1e-8)
    }
}

/// Compares the Hoffman estimate at `x` with the exact distance.
pub fn hoffman_distance_check(system: &PolyhedralSystem, x: &DVector<f64>) -> Result<HoffmanCheck> {
    let projection = project_onto_polyhedron(system, x)?;
    let residual_norm = system.residual(x)?.norm();
    let constant = hoffman_constant(&system.e, &system.f)?;
    Ok(HoffmanCheck {
        constant,
        residual_norm,
        bound: constant * residual_norm,
        distance: (&projection - x).norm(),
        projection,
    })
}
