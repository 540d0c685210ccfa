//! Empirical Lipschitz constants of the reconstruction map.

use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_models::{Fidelity, ForwardOperator, LinearOperator};
use crate::linalg;
use crate::potentials::Convexity;
use crate::regularizer::{AdaptiveRegularizer, SpatialMask};
use crate::solver::{agd_minimize, ReconstructionProblem};

pub const PROBE_TOL: f64 = 1e-9;
pub const PROBE_MAX_ITERS: usize = 50_000;
/// Largest input size for which `||H^-1||` is computed densely.
pub const MAX_DENSE_PIXELS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub bound: f64,
}

impl LipschitzReport {
    fn from_ratios(ratios: Vec<f64>, bound: f64) -> Self {
        let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
        LipschitzReport { ratios, max_ratio, bound }
    }
}

/// `||H^-1||` from the dense matrix; errors when `H` is singular.
pub fn inverse_norm(op: &ForwardOperator) -> Result<f64> {
    if op.is_identity() {
        return Ok(1.0);
    }
    let (h, w) = op.shape_in();
    if op.shape_out() != op.shape_in() {
        return Err(Error::invalid(format!("operator {} is not square", op.kind())));
    }
    if h * w > MAX_DENSE_PIXELS {
        return Err(Error::SizeLimit(format!("dense inverse norm limited to {MAX_DENSE_PIXELS} pixels")));
    }
    let smin = linalg::smallest_singular_value(&op.dense_matrix());
    if smin <= 1e-10 {
        return Err(Error::invalid(format!("operator {} is not invertible", op.kind())));
    }
    Ok(1.0 / smin)
}

fn check_template(reg: &AdaptiveRegularizer, op: &ForwardOperator, lambda: f64) -> Result<f64> {
    if reg.potential().convexity() != Convexity::Convex {
        return Err(Error::invalid("solution-map probes need a convex model"));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid("lambda must be finite and nonnegative"));
    }
    inverse_norm(op)
}

fn solve(op: &ForwardOperator, reg: &AdaptiveRegularizer, lambda: f64, y: &Array2<f64>) -> Result<Array2<f64>> {
    let init = if op.is_identity() { y.clone() } else { op.adjoint(y)? };
    let p = ReconstructionProblem::new(y.clone(), op.clone(), Fidelity::quadratic(1.0)?, reg.clone(), lambda, init)?;
    Ok(agd_minimize(&p, PROBE_TOL, PROBE_MAX_ITERS)?.x_hat)
}

fn distance<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |s, p, q| s + (p - q) * (p - q)).sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

/// Ratios `||x1 - x2|| / ||y1 - y2||` over `n_pairs` random data pairs.
///
/// Data are `H x0 + 0.1 n` for smooth random `x0`; the second member of each
/// pair is perturbed by a vector of norm `radius`. For convex models the
/// ratio is bounded by `||H^-1||`.
pub fn empirical_solution_map_lipschitz(
    reg: &AdaptiveRegularizer,
    op: &ForwardOperator,
    lambda: f64,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<LipschitzReport> {
    let bound = check_template(reg, op, lambda)?;
    if !(radius > 0.0) {
        return Err(Error::invalid("perturbation radius must be positive"));
    }
    let shape = op.shape_in();
    let ratios = (0..n_pairs as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let x0 = Array2::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0));
            let y1 = op.apply(&x0)? + &(gaussian(&mut rng, op.shape_out()) * 0.1);
            let d = gaussian(&mut rng, op.shape_out());
            let y2 = &y1 + &(&d * (radius / distance(&d, &Array2::zeros(d.dim()))));
            let x1 = solve(op, reg, lambda, &y1)?;
            let x2 = solve(op, reg, lambda, &y2)?;
            Ok(distance(&x1, &x2) / distance(&y1, &y2))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LipschitzReport::from_ratios(ratios, bound))
}

/// `lambda ||H^-1||^2 (sum_c sup|psi_c'|^2 ||W_c||^2)^(1/2)`.
pub fn mask_sensitivity_bound(reg: &AdaptiveRegularizer, op: &ForwardOperator, lambda: f64) -> Result<f64> {
    let inv = inverse_norm(op)?;
    let slope = reg.potential().sup_abs_first_deriv();
    let sum: f64 = reg
        .alphas()
        .iter()
        .zip(reg.channel_bounds())
        .map(|(alpha, w)| (slope / alpha * w).powi(2))
        .sum();
    Ok(lambda * inv * inv * sum.sqrt())
}

/// Ratios `||x(L1) - x(L2)|| / ||L1 - L2||` for random mask pairs at fixed data.
pub fn empirical_mask_lipschitz(
    reg: &AdaptiveRegularizer,
    op: &ForwardOperator,
    lambda: f64,
    y: &Array2<f64>,
    epsilon: f64,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<LipschitzReport> {
    check_template(reg, op, lambda)?;
    let bound = mask_sensitivity_bound(reg, op, lambda)?;
    let (h, w) = op.shape_in();
    let c = reg.n_channels();
    let ratios = (0..n_pairs as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let m1 = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(epsilon..=1.0));
            let m2 = Array3::from_shape_fn((c, h, w), |_| rng.sample::<f64, _>(StandardNormal) * radius);
            let m2 = (&m1 + &m2).mapv(|v| v.clamp(epsilon, 1.0));
            let gap = distance(&m1, &m2);
            if gap == 0.0 {
                return Ok(0.0);
            }
            let x1 = solve(op, &reg.with_mask(SpatialMask::new(m1, epsilon)?)?, lambda, y)?;
            let x2 = solve(op, &reg.with_mask(SpatialMask::new(m2, epsilon)?)?, lambda, y)?;
            Ok(distance(&x1, &x2) / gap)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LipschitzReport::from_ratios(ratios, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_bank::FilterBank;
    use crate::forward_models::BlurStride;
    use crate::potentials::{NoiseScaling, SplinePotential, DEFAULT_KNOT_COUNT, DEFAULT_SPACING};

    fn convex_model(seed: u64) -> AdaptiveRegularizer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plus = (0..DEFAULT_KNOT_COUNT - 1).map(|_| rng.gen_range(0.1..1.0)).collect();
        let p = SplinePotential::new(DEFAULT_KNOT_COUNT, DEFAULT_SPACING, plus, vec![0.0; DEFAULT_KNOT_COUNT - 1], 3.0, Convexity::Convex)
            .unwrap();
        AdaptiveRegularizer::new(FilterBank::dct(4, 3).unwrap(), p, vec![NoiseScaling::constant(0.5); 4], 0.05).unwrap()
    }

    #[test]
    fn zero_regularizer_is_an_isometry() {
        let p = SplinePotential::zero(DEFAULT_KNOT_COUNT, DEFAULT_SPACING).unwrap();
        let reg = AdaptiveRegularizer::with_fixed_alpha(FilterBank::dirac(3).unwrap(), p, 1.0, 0.1).unwrap();
        let r = empirical_solution_map_lipschitz(&reg, &ForwardOperator::identity((5, 5)), 1.0, 4, 0.1, 1).unwrap();
        assert!(r.ratios.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(r.bound, 1.0);
    }

    #[test]
    fn convex_denoiser_is_nonexpansive() {
        let r = empirical_solution_map_lipschitz(&convex_model(1), &ForwardOperator::identity((8, 8)), 1.0, 12, 0.05, 2).unwrap();
        assert!(r.max_ratio <= r.bound * (1.0 + 1e-3), "{}", r.max_ratio);
    }

    #[test]
    fn invertible_blur_respects_inverse_norm() {
        let op = ForwardOperator::BlurStride(BlurStride::new((6, 6), 3, 0.5, 1).unwrap());
        let r = empirical_solution_map_lipschitz(&convex_model(2), &op, 0.5, 6, 0.05, 3).unwrap();
        assert!(r.bound >= 1.0);
        assert!(r.max_ratio <= r.bound * (1.0 + 1e-3), "{} vs {}", r.max_ratio, r.bound);
    }

    #[test]
    fn mask_sensitivity_within_bound() {
        let reg = convex_model(3);
        let op = ForwardOperator::identity((8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Array2::from_shape_fn((8, 8), |(i, j)| if i > j { 0.8 } else { 0.2 } + 0.05 * rng.sample::<f64, _>(StandardNormal));
        let r = empirical_mask_lipschitz(&reg, &op, 1.0, &y, 0.01, 8, 0.05, 5).unwrap();
        assert!(r.max_ratio > 0.0);
        assert!(r.max_ratio <= r.bound * 1.05, "{} vs {}", r.max_ratio, r.bound);
    }

    #[test]
    fn weakly_convex_and_singular_inputs_rejected() {
        let p = SplinePotential::with_default_minus(DEFAULT_KNOT_COUNT, DEFAULT_SPACING, vec![0.5; 100], 2.0, Convexity::WeaklyConvex)
            .unwrap();
        let reg = AdaptiveRegularizer::with_fixed_alpha(FilterBank::dirac(3).unwrap(), p, 1.0, 0.1).unwrap();
        assert!(empirical_solution_map_lipschitz(&reg, &ForwardOperator::identity((4, 4)), 1.0, 1, 0.1, 0).is_err());
        let strided = ForwardOperator::BlurStride(BlurStride::new((6, 6), 3, 0.5, 2).unwrap());
        assert!(inverse_norm(&strided).is_err());
    }
}
