//! Convergence of reconstructions as the noise level vanishes.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_models::{Fidelity, ForwardOperator, LinearOperator};
use crate::potentials::Convexity;
use crate::regularizer::AdaptiveRegularizer;
use crate::solver::{agd_minimize, ReconstructionProblem};

/// Regularization weight standing in for the noiseless limit.
pub const LAMBDA_FLOOR: f64 = 1e-8;
pub const MIN_LEVELS: usize = 4;
/// Mean errors below this make the slope fit meaningless.
const DEGENERATE_ERROR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct RateExperiment {
    /// Strictly decreasing noise norms `delta_k`.
    pub deltas: Vec<f64>,
    /// `lambda(delta) = c sqrt(delta)`.
    pub c: f64,
    pub regularizer: AdaptiveRegularizer,
    pub operator: ForwardOperator,
    pub x_true: Array2<f64>,
    pub seeds: Vec<u64>,
    /// Actual noise norm is `noise_scale * delta`.
    pub noise_scale: f64,
    pub tol: f64,
    pub max_iters: usize,
}

/// `levels` values from `max` down to `min`, equally spaced in log scale.
pub fn geometric_deltas(max: f64, min: f64, levels: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min) || levels < 2 {
        return Err(Error::invalid("geometric schedule needs 0 < min < max and two levels"));
    }
    let ratio = (min / max).powf(1.0 / (levels - 1) as f64);
    Ok((0..levels).map(|k| if k + 1 == levels { min } else { max * ratio.powi(k as i32) }).collect())
}

impl RateExperiment {
    pub fn new(
        deltas: Vec<f64>,
        c: f64,
        regularizer: AdaptiveRegularizer,
        operator: ForwardOperator,
        x_true: Array2<f64>,
        seeds: Vec<u64>,
    ) -> Self {
        RateExperiment { deltas, c, regularizer, operator, x_true, seeds, noise_scale: 1.0, tol: 1e-10, max_iters: 100_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.len() < MIN_LEVELS {
            return Err(Error::invalid(format!("rate fits need at least {MIN_LEVELS} noise levels, got {}", self.deltas.len())));
        }
        if self.deltas.iter().any(|d| !(d.is_finite() && *d > 0.0)) || self.deltas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("noise levels must be positive and strictly decreasing"));
        }
        if self.regularizer.potential().convexity() != Convexity::Convex {
            return Err(Error::invalid("rate experiments need a convex model"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("no seeds"));
        }
        if !(self.c >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::invalid("rate constant and noise scale must be nonnegative"));
        }
        if self.x_true.dim() != self.operator.shape_in() {
            return Err(Error::shape(self.operator.shape_in(), self.x_true.dim()));
        }
        Ok(())
    }

    pub fn lambda(&self, delta: f64) -> f64 {
        (self.c * delta.sqrt()).max(LAMBDA_FLOOR)
    }
}

#[derive(Debug, Clone)]
pub struct RateResult {
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `errors[s][k]`: seed `s`, level `k`.
    pub errors: Vec<Vec<f64>>,
    pub mean_errors: Vec<f64>,
    /// Seed-averaged least-squares slope of `ln error` against `ln delta`;
    /// `None` when errors sit at solver precision.
    pub slope: Option<f64>,
    /// The floor solution only approximates the constrained limit.
    pub limit_approximate: bool,
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn solve(exp: &RateExperiment, y: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    let op = &exp.operator;
    let init = if op.is_identity() { y.clone() } else { op.adjoint(y)? };
    let p = ReconstructionProblem::new(y.clone(), op.clone(), Fidelity::quadratic(1.0)?, exp.regularizer.clone(), lambda, init)?;
    Ok(agd_minimize(&p, exp.tol, exp.max_iters)?.x_hat)
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Runs the experiment: `||x_hat(y + delta n, c sqrt(delta)) - x_hat(y, 1e-8)||`
/// for every level and seed, with `||n|| = noise_scale`.
pub fn vanishing_noise_rates(exp: &RateExperiment) -> Result<RateResult> {
    exp.validate()?;
    let y = exp.operator.apply(&exp.x_true)?;
    let limit = solve(exp, &y, LAMBDA_FLOOR)?;
    let limit_approximate = crate::stability_lab::inverse_norm(&exp.operator).is_err();
    let lambdas: Vec<f64> = exp.deltas.iter().map(|d| exp.lambda(*d)).collect();
    let errors = exp
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Array2::from_shape_fn(y.dim(), |_| StandardNormal.sample(&mut rng));
            let nn = norm(&n);
            let direction = n / nn;
            exp.deltas
                .iter()
                .zip(&lambdas)
                .map(|(&d, &l)| {
                    let yd = &y + &(&direction * (exp.noise_scale * d));
                    let x = solve(exp, &yd, l)?;
                    Ok(Zip::from(&x).and(&limit).fold(0.0, |s, a, b| s + (a - b) * (a - b)).sqrt())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let levels = exp.deltas.len();
    let mean_errors: Vec<f64> =
        (0..levels).map(|k| errors.iter().map(|e| e[k]).sum::<f64>() / errors.len() as f64).collect();
    let log_d: Vec<f64> = exp.deltas.iter().map(|d| d.ln()).collect();
    let degenerate = errors.iter().flatten().any(|e| *e < DEGENERATE_ERROR);
    let slope = (!degenerate).then(|| {
        errors
            .iter()
            .map(|e| fit_slope(&log_d, &e.iter().map(|v| v.ln()).collect::<Vec<_>>()))
            .sum::<f64>()
            / errors.len() as f64
    });
    Ok(RateResult { deltas: exp.deltas.clone(), lambdas, errors, mean_errors, slope, limit_approximate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_bank::FilterBank;
    use crate::potentials::{SplinePotential, DEFAULT_KNOT_COUNT, DEFAULT_SPACING};

    fn quadratic_model(theta: f64) -> AdaptiveRegularizer {
        // alpha = 0.01 keeps |x| <= 10 inside the quadratic part
        let p = SplinePotential::quadratic(DEFAULT_KNOT_COUNT, DEFAULT_SPACING, theta).unwrap();
        AdaptiveRegularizer::with_fixed_alpha(FilterBank::dirac(1).unwrap(), p, 0.01, 0.1).unwrap()
    }

    fn truth() -> Array2<f64> {
        Array2::from_shape_fn((6, 6), |(i, j)| if (i + j) % 3 == 0 { 0.9 } else { 0.3 })
    }

    #[test]
    fn schedule_is_geometric() {
        let d = geometric_deltas(1e-1, 1e-4, 7).unwrap();
        assert_eq!(d.len(), 7);
        assert_eq!(d[0], 1e-1);
        assert_eq!(d[6], 1e-4);
        assert!(d.windows(2).all(|w| (w[1] / w[0] - 10f64.powf(-0.5)).abs() < 1e-12));
    }

    #[test]
    fn too_few_levels_rejected() {
        let exp = RateExperiment::new(vec![1e-1, 1e-2, 1e-3], 1.0, quadratic_model(1.0), ForwardOperator::identity((6, 6)), truth(), vec![0]);
        assert!(vanishing_noise_rates(&exp).is_err());
    }

    #[test]
    fn noiseless_unregularized_run_is_degenerate() {
        let mut exp =
            RateExperiment::new(geometric_deltas(1e-1, 1e-4, 4).unwrap(), 0.0, quadratic_model(1.0), ForwardOperator::identity((6, 6)), truth(), vec![1, 2]);
        exp.noise_scale = 0.0;
        let r = vanishing_noise_rates(&exp).unwrap();
        assert!(r.slope.is_none());
        assert!(r.errors.iter().flatten().all(|e| *e < 1e-9));
    }

    #[test]
    fn quadratic_model_matches_closed_form() {
        let theta = 2.0;
        let exp = RateExperiment::new(
            geometric_deltas(1e-1, 1e-4, 5).unwrap(),
            0.5,
            quadratic_model(theta),
            ForwardOperator::identity((6, 6)),
            truth(),
            vec![3, 4],
        );
        let r = vanishing_noise_rates(&exp).unwrap();
        let y = truth();
        let limit = &y / (1.0 + LAMBDA_FLOOR * theta);
        for (s, &seed) in exp.seeds.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Array2::from_shape_fn(y.dim(), |_| StandardNormal.sample(&mut rng));
            let n = &n / norm(&n);
            for (k, &d) in exp.deltas.iter().enumerate() {
                let x = (&y + &(&n * d)) / (1.0 + r.lambdas[k] * theta);
                let analytic = norm(&(&x - &limit));
                assert!((r.errors[s][k] - analytic).abs() <= 1e-6 * analytic, "{} vs {analytic}", r.errors[s][k]);
            }
        }
        // bias c sqrt(delta) theta ||y|| dominates the noise, so the slope is near 1/2
        let slope = r.slope.unwrap();
        assert!((0.35..=0.65).contains(&slope), "{slope}");
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let xs: Vec<f64> = (0..5).map(|k| -(k as f64)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 3.0).collect();
        assert!((fit_slope(&xs, &ys) - 0.5).abs() < 1e-14);
    }
}
