//! Coercivity of the filter responses and integrability of the Gibbs prior.

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter_bank::FilterBank;
use crate::regularizer::AdaptiveRegularizer;

/// Largest variable count solved exactly (one LP per orthant pair).
pub const MAX_EXACT_VARIABLES: usize = 12;
/// Largest variable count accepted at all.
pub const MAX_VARIABLES: usize = 64;
const HEURISTIC_STARTS: usize = 200;
const HEURISTIC_STEPS: usize = 400;
const HEURISTIC_SEED: u64 = 0xc0e7_c1f1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coercivity {
    /// `min_{||x||_1 = 1} max_c ||W_c x||_1`.
    pub gamma: f64,
    /// False when `gamma` is a multi-start upper estimate.
    pub exact: bool,
}

fn channel_matrices(bank: &FilterBank, grid: (usize, usize)) -> Result<Vec<DMatrix<f64>>> {
    let n = grid.0 * grid.1;
    if n == 0 {
        return Err(Error::invalid("empty grid"));
    }
    if n > MAX_VARIABLES {
        return Err(Error::SizeLimit(format!("coercivity needs at most {MAX_VARIABLES} pixels, got {n}")));
    }
    Ok((0..bank.n_channels()).map(|c| bank.channel_matrix(c, grid)).collect())
}

/// `max_c ||W_c x||_1`.
pub fn max_channel_l1(mats: &[DMatrix<f64>], x: &[f64]) -> f64 {
    mats.iter()
        .map(|w| {
            (0..w.nrows())
                .map(|i| (0..w.ncols()).map(|j| w[(i, j)] * x[j]).sum::<f64>().abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Minimum of `max_c ||W_c x||_1` on the facet `{s_i x_i >= 0, sum s_i x_i = 1}`.
fn facet_minimum(mats: &[DMatrix<f64>], signs: &[f64]) -> Result<f64> {
    let n = signs.len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let t = lp.add_var(1.0, (0.0, f64::INFINITY));
    let x: Vec<_> = signs
        .iter()
        .map(|&s| if s > 0.0 { lp.add_var(0.0, (0.0, f64::INFINITY)) } else { lp.add_var(0.0, (f64::NEG_INFINITY, 0.0)) })
        .collect();
    let mut facet = LinearExpr::empty();
    for (v, s) in x.iter().zip(signs) {
        facet.add(*v, *s);
    }
    lp.add_constraint(facet, ComparisonOp::Eq, 1.0);
    for w in mats {
        let mut budget = LinearExpr::empty();
        budget.add(t, -1.0);
        for i in 0..w.nrows() {
            let row: Vec<(usize, f64)> = (0..n).filter(|&j| w[(i, j)] != 0.0).map(|j| (j, w[(i, j)])).collect();
            if row.is_empty() {
                continue;
            }
            let e = lp.add_var(0.0, (0.0, f64::INFINITY));
            budget.add(e, 1.0);
            for sign in [1.0, -1.0] {
                let mut expr = LinearExpr::empty();
                for &(j, v) in &row {
                    expr.add(x[j], sign * v);
                }
                expr.add(e, -1.0);
                lp.add_constraint(expr, ComparisonOp::Le, 0.0);
            }
        }
        lp.add_constraint(budget, ComparisonOp::Le, 0.0);
    }
    let sol = lp.solve().map_err(|e| Error::Numerical(format!("coercivity LP failed: {e}")))?;
    Ok(sol.objective())
}

/// `gamma` for the bank on `grid`: exact facet LPs up to
/// [`MAX_EXACT_VARIABLES`] pixels, multi-start subgradient descent beyond.
pub fn gibbs_coercivity(bank: &FilterBank, grid: (usize, usize)) -> Result<Coercivity> {
    let mats = channel_matrices(bank, grid)?;
    let n = grid.0 * grid.1;
    if n <= MAX_EXACT_VARIABLES {
        // x and -x give the same value, so fix the sign of the first pixel
        let gamma = (0u64..1 << (n - 1))
            .into_par_iter()
            .map(|pattern| {
                let signs: Vec<f64> =
                    (0..n).map(|i| if i > 0 && pattern & (1 << (i - 1)) != 0 { -1.0 } else { 1.0 }).collect();
                facet_minimum(&mats, &signs)
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        return Ok(Coercivity { gamma: gamma.max(0.0), exact: true });
    }
    Ok(Coercivity { gamma: multistart_estimate(&mats, n), exact: false })
}

fn multistart_estimate(mats: &[DMatrix<f64>], n: usize) -> f64 {
    (0..HEURISTIC_STARTS as u64)
        .into_par_iter()
        .map(|start| {
            let mut rng = ChaCha8Rng::seed_from_u64(HEURISTIC_SEED);
            rng.set_stream(start);
            let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize_l1(&mut x);
            let mut best = max_channel_l1(mats, &x);
            for k in 0..HEURISTIC_STEPS {
                let g = subgradient(mats, &x);
                let step = 0.5 / (1.0 + k as f64).sqrt();
                let gn = g.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
                x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= step * gi / gn);
                if !normalize_l1(&mut x) {
                    return 0.0;
                }
                best = best.min(max_channel_l1(mats, &x));
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min)
}

fn normalize_l1(x: &mut [f64]) -> bool {
    let s: f64 = x.iter().map(|v| v.abs()).sum();
    if s == 0.0 {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= s);
    true
}

fn subgradient(mats: &[DMatrix<f64>], x: &[f64]) -> Vec<f64> {
    let (w, _) = mats
        .iter()
        .map(|w| (w, max_channel_l1(std::slice::from_ref(w), x)))
        .fold((&mats[0], f64::NEG_INFINITY), |acc, item| if item.1 > acc.1 { item } else { acc });
    let mut g = vec![0.0; x.len()];
    for i in 0..w.nrows() {
        let r: f64 = (0..w.ncols()).map(|j| w[(i, j)] * x[j]).sum();
        let s = r.signum();
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += s * w[(i, j)];
        }
    }
    g
}

/// Smallest `max_c ||W_c x||_1` among `n_points` random points of the L1
/// unit sphere (uniform on each facet, uniformly chosen facet).
pub fn sampled_coercivity(bank: &FilterBank, grid: (usize, usize), n_points: usize, seed: u64) -> Result<f64> {
    let mats = channel_matrices(bank, grid)?;
    let n = grid.0 * grid.1;
    let chunks = rayon::current_num_threads().max(1) * 4;
    let per = n_points.div_ceil(chunks);
    Ok((0..chunks as u64)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let mut best = f64::INFINITY;
            let mut x = vec![0.0; n];
            for _ in 0..per {
                for xi in x.iter_mut() {
                    let e: f64 = rng.sample(Exp1);
                    *xi = if rng.gen::<bool>() { e } else { -e };
                }
                normalize_l1(&mut x);
                best = best.min(max_channel_l1(&mats, &x));
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizability {
    pub normalizable: bool,
    /// Smallest tail slope `a` with `psi(x) >= a |x| + b`.
    pub slope: f64,
    pub offset: f64,
    /// Upper bound on `ln int exp(-lambda R(x)) dx` (infinite when not normalizable).
    pub log_bound: f64,
    /// Point where the hypotheses fail.
    pub witness: Option<f64>,
}

const LINEAR_BOUND_SAMPLES: usize = 20_001;

/// Checks that `exp(-lambda R)` is integrable on `dims` and bounds its integral.
///
/// Uses `psi(x) >= a |x| + b` for the shared profile, transfers it to every
/// channel scaling and mask floor, and integrates
/// `exp(-lambda (a' gamma ||x||_1 + B))` in closed form.
pub fn prior_normalizability_check(
    reg: &AdaptiveRegularizer,
    gamma: f64,
    dims: (usize, usize),
    lambda: f64,
) -> Result<Normalizability> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let p = reg.potential();
    let (left_slope, right_slope) = p.tail_slopes();
    let a = right_slope.min(-left_slope);
    let (lo, hi) = (p.left(), p.right());
    let fail = |witness: f64, a: f64| Normalizability {
        normalizable: false,
        slope: a,
        offset: f64::NAN,
        log_bound: f64::INFINITY,
        witness: Some(witness),
    };
    if !(a > 0.0) {
        return Ok(fail(if right_slope <= -left_slope { hi } else { lo }, a));
    }
    if !(gamma > 0.0) {
        return Ok(fail(0.0, a));
    }
    // beyond the knots psi grows at least as fast as a|x|, so the grid covers the minimum
    let mut b = f64::INFINITY;
    for k in 0..LINEAR_BOUND_SAMPLES {
        let x = lo + (hi - lo) * k as f64 / (LINEAR_BOUND_SAMPLES - 1) as f64;
        b = b.min(p.eval_unchecked(x).value - a * x.abs());
    }
    for x in [lo, hi, 2.0 * lo, 2.0 * hi] {
        if p.eval_unchecked(x).value < a * x.abs() + b - 1e-12 * (1.0 + x.abs()) {
            return Ok(fail(x, a));
        }
    }
    let (floor, ceil) = match reg.mask() {
        Some(m) => (m.weights().iter().fold(1.0f64, |acc, v| acc.min(*v)), 1.0),
        None => (1.0, 1.0),
    };
    let pixels = (dims.0 * dims.1) as f64;
    let mut slope = f64::INFINITY;
    let mut offset = 0.0;
    for &alpha in reg.alphas() {
        // psi_c(z) = psi(alpha z) / alpha^2 >= (a / alpha) |z| + b / alpha^2
        slope = slope.min(floor * a / alpha);
        let bc = b / (alpha * alpha);
        offset += pixels * (floor * bc).min(ceil * bc);
    }
    let rate = lambda * slope * gamma;
    let log_bound = -lambda * offset + pixels * (2.0 / rate).ln();
    Ok(Normalizability { normalizable: true, slope: a, offset: b, log_bound, witness: None })
}
