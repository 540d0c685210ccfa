//! Quadratic-spline potentials with piecewise-constant second derivatives.
//!
//! A potential is stored through its second derivative on a uniform knot grid
//! centered at the origin. The effective second derivative on interval `i` is
//! `mu * psi_plus[i] - c_cvx * psi_minus[i]`; outside the knot range it is zero,
//! so the potential continues linearly.

use crate::error::{Error, Result};

pub const DEFAULT_KNOT_COUNT: usize = 101;
pub const DEFAULT_SPACING: f64 = 0.002;
/// Upper end of the supported noise range, 30/255.
pub const SIGMA_MAX: f64 = 30.0 / 255.0;
pub const DEFAULT_ALPHA_KNOTS: usize = 11;
/// Width (in intervals) of the default concave part used when `c_cvx = 1`.
pub const DEFAULT_MINUS_SUPPORT: usize = 21;
const ALPHA_SIGMA_SHIFT: f64 = 1e-5;

/// Convex (`c_cvx = 0`) or 1-weakly convex (`c_cvx = 1`) potential family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convexity {
    Convex,
    WeaklyConvex,
}

impl Convexity {
    pub fn c_cvx(self) -> f64 {
        match self {
            Convexity::Convex => 0.0,
            Convexity::WeaklyConvex => 1.0,
        }
    }

    pub fn from_c_cvx(c: f64) -> Result<Self> {
        if c == 0.0 {
            Ok(Convexity::Convex)
        } else if c == 1.0 {
            Ok(Convexity::WeaklyConvex)
        } else {
            Err(Error::invalid(format!("c_cvx must be 0 or 1, got {c}")))
        }
    }
}

/// Value and derivatives of a potential at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialValue {
    pub value: f64,
    pub first_deriv: f64,
    pub second_deriv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplinePotential {
    knot_count: usize,
    spacing: f64,
    psi_plus: Vec<f64>,
    psi_minus: Vec<f64>,
    mu: f64,
    convexity: Convexity,
    value_offset: f64,
    slope_offset: f64,
    coeffs: Vec<f64>,
    knot_values: Vec<f64>,
    knot_slopes: Vec<f64>,
}

impl SplinePotential {
    /// Builds a potential from its two coefficient profiles.
    ///
    /// Both profiles hold one second-derivative value in `[0, 1]` per knot
    /// interval (`knot_count - 1` entries).
    pub fn new(
        knot_count: usize,
        spacing: f64,
        psi_plus: Vec<f64>,
        psi_minus: Vec<f64>,
        mu: f64,
        convexity: Convexity,
    ) -> Result<Self> {
        if knot_count < 2 {
            return Err(Error::invalid("a spline needs at least two knots"));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::invalid(format!("knot spacing must be positive, got {spacing}")));
        }
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::invalid(format!("mu must be positive, got {mu}")));
        }
        let intervals = knot_count - 1;
        for (name, profile) in [("psi_plus", &psi_plus), ("psi_minus", &psi_minus)] {
            if profile.len() != intervals {
                return Err(Error::shape(intervals, profile.len()));
            }
            if let Some(bad) = profile.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!(
                    "{name} coefficient {bad} outside [0, 1]"
                )));
            }
        }
        let mut potential = SplinePotential {
            knot_count,
            spacing,
            psi_plus,
            psi_minus,
            mu,
            convexity,
            value_offset: 0.0,
            slope_offset: 0.0,
            coeffs: Vec::new(),
            knot_values: Vec::new(),
            knot_slopes: Vec::new(),
        };
        potential.calibrate();
        Ok(potential)
    }

    /// `mu * x^2 / 2` inside the knot range, linear beyond it.
    pub fn quadratic(knot_count: usize, spacing: f64, mu: f64) -> Result<Self> {
        let n = knot_count.saturating_sub(1);
        Self::new(knot_count, spacing, vec![1.0; n], vec![0.0; n], mu, Convexity::Convex)
    }

    /// Potential that vanishes identically (`psi_plus = psi_minus = 0`).
    pub fn zero(knot_count: usize, spacing: f64) -> Result<Self> {
        let n = knot_count.saturating_sub(1);
        Self::new(knot_count, spacing, vec![0.0; n], vec![0.0; n], 1.0, Convexity::Convex)
    }

    /// Potential whose `psi_minus` is the default profile: one on the
    /// centered [`DEFAULT_MINUS_SUPPORT`] intervals and zero elsewhere.
    pub fn with_default_minus(
        knot_count: usize,
        spacing: f64,
        psi_plus: Vec<f64>,
        mu: f64,
        convexity: Convexity,
    ) -> Result<Self> {
        let minus = match convexity {
            Convexity::Convex => vec![0.0; knot_count.saturating_sub(1)],
            Convexity::WeaklyConvex => default_minus_profile(knot_count),
        };
        Self::new(knot_count, spacing, psi_plus, minus, mu, convexity)
    }

    /// Same profiles with new parameters; used by optimizers after a step.
    pub fn with_parameters(&self, psi_plus: Vec<f64>, psi_minus: Vec<f64>, mu: f64) -> Result<Self> {
        Self::new(self.knot_count, self.spacing, psi_plus, psi_minus, mu, self.convexity)
    }

    fn calibrate(&mut self) {
        let intervals = self.knot_count - 1;
        let c_cvx = self.convexity.c_cvx();
        self.coeffs = (0..intervals)
            .map(|i| self.mu * self.psi_plus[i] - c_cvx * self.psi_minus[i])
            .collect();

        // Raw antiderivatives anchored at the leftmost knot.
        let h = self.spacing;
        let mut slopes = vec![0.0; self.knot_count];
        let mut values = vec![0.0; self.knot_count];
        for i in 0..intervals {
            let a = self.coeffs[i];
            slopes[i + 1] = slopes[i] + a * h;
            values[i + 1] = values[i] + slopes[i] * h + 0.5 * a * h * h;
        }
        self.knot_slopes = slopes;
        self.knot_values = values;
        let at_zero = self.eval_raw(0.0);

        // Remove the affine part at the origin: psi(0) = 0 and psi'(0) = 0.
        for i in 0..self.knot_count {
            let x = self.knot_position(i);
            self.knot_values[i] -= at_zero.value + at_zero.first_deriv * x;
            self.knot_slopes[i] -= at_zero.first_deriv;
        }
        self.slope_offset = -at_zero.first_deriv;

        // rounding leaves the exact minimum of a convex profile a few ulps below zero
        let scale = self.knot_values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut lift = (-self.min_over_knot_range()).max(0.0);
        if lift <= 64.0 * f64::EPSILON * scale {
            lift = 0.0;
        }
        for v in &mut self.knot_values {
            *v += lift;
        }
        self.value_offset = lift - at_zero.value;
    }

    /// Exact minimum of the calibrated potential over the knot range,
    /// including interior stationary points.
    fn min_over_knot_range(&self) -> f64 {
        let h = self.spacing;
        let mut best = self.knot_values.iter().copied().fold(f64::INFINITY, f64::min);
        for i in 0..self.knot_count - 1 {
            let a = self.coeffs[i];
            let d = self.knot_slopes[i];
            if a > 0.0 {
                let t = -d / a;
                if t > 0.0 && t < h {
                    best = best.min(self.knot_values[i] + d * t + 0.5 * a * t * t);
                }
            }
        }
        best
    }

    #[inline]
    fn eval_raw(&self, x: f64) -> PotentialValue {
        let left = self.left();
        let last = self.knot_count - 1;
        if x <= left {
            let s = self.knot_slopes[0];
            return PotentialValue {
                value: self.knot_values[0] + s * (x - left),
                first_deriv: s,
                second_deriv: 0.0,
            };
        }
        let right = self.right();
        if x >= right {
            let s = self.knot_slopes[last];
            return PotentialValue {
                value: self.knot_values[last] + s * (x - right),
                first_deriv: s,
                second_deriv: 0.0,
            };
        }
        let i = (((x - left) / self.spacing) as usize).min(last - 1);
        let t = x - self.knot_position(i);
        let a = self.coeffs[i];
        let d = self.knot_slopes[i];
        PotentialValue {
            value: self.knot_values[i] + d * t + 0.5 * a * t * t,
            first_deriv: d + a * t,
            second_deriv: a,
        }
    }

    /// Value, slope and (piecewise-constant) second derivative at `x`.
    pub fn eval(&self, x: f64) -> Result<PotentialValue> {
        if !x.is_finite() {
            return Err(Error::NonFinite("potential argument".into()));
        }
        Ok(self.eval_raw(x))
    }

    /// Unchecked evaluation for hot loops; `x` must be finite.
    #[inline]
    pub fn eval_unchecked(&self, x: f64) -> PotentialValue {
        self.eval_raw(x)
    }

    /// `alpha^-2 psi(alpha x)` and its derivative `alpha^-1 psi'(alpha x)`.
    pub fn scaled_eval(&self, alpha: f64, x: f64) -> Result<(f64, f64)> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("scaling alpha must be positive, got {alpha}")));
        }
        let p = self.eval(alpha * x)?;
        Ok((p.value / (alpha * alpha), p.first_deriv / alpha))
    }

    /// Adds `weight * d psi'(v) / d coeffs[i]` to `acc[i]` for every interval.
    ///
    /// `psi'(v)` is linear in the effective coefficients; the derivative with
    /// respect to interval `i` is the signed length of `[0, v]` inside it.
    pub fn accumulate_slope_basis(&self, v: f64, weight: f64, acc: &mut [f64]) {
        debug_assert_eq!(acc.len(), self.knot_count - 1);
        if v == 0.0 || weight == 0.0 {
            return;
        }
        let left = self.left();
        let (lo, hi) = if v > 0.0 { (0.0, v) } else { (v, 0.0) };
        let sign = if v > 0.0 { 1.0 } else { -1.0 };
        let last = self.knot_count - 2;
        let first_idx = (((lo - left) / self.spacing).floor().max(0.0) as usize).min(last);
        let last_idx = (((hi - left) / self.spacing).floor().max(0.0) as usize).min(last);
        for (i, slot) in acc.iter_mut().enumerate().take(last_idx + 1).skip(first_idx) {
            let a = self.knot_position(i);
            let b = a + self.spacing;
            let overlap = hi.min(b) - lo.max(a);
            if overlap > 0.0 {
                *slot += sign * weight * overlap;
            }
        }
    }

    pub fn knot_position(&self, i: usize) -> f64 {
        self.left() + i as f64 * self.spacing
    }

    pub fn left(&self) -> f64 {
        -0.5 * (self.knot_count - 1) as f64 * self.spacing
    }

    pub fn right(&self) -> f64 {
        0.5 * (self.knot_count - 1) as f64 * self.spacing
    }

    pub fn knot_count(&self) -> usize {
        self.knot_count
    }

    pub fn interval_count(&self) -> usize {
        self.knot_count - 1
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn convexity(&self) -> Convexity {
        self.convexity
    }

    pub fn psi_plus(&self) -> &[f64] {
        &self.psi_plus
    }

    pub fn psi_minus(&self) -> &[f64] {
        &self.psi_minus
    }

    /// Effective second derivative per interval.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn value_offset(&self) -> f64 {
        self.value_offset
    }

    pub fn slope_offset(&self) -> f64 {
        self.slope_offset
    }

    /// Slopes of the linear continuation beyond the knot range `(left, right)`.
    pub fn tail_slopes(&self) -> (f64, f64) {
        (self.knot_slopes[0], self.knot_slopes[self.knot_count - 1])
    }

    pub fn sup_abs_second_deriv(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// `sup |psi'|`; the slope is piecewise linear so the sup sits on a knot.
    pub fn sup_abs_first_deriv(&self) -> f64 {
        self.knot_slopes.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// True when `psi` is bounded below on the whole line.
    pub fn is_bounded_below(&self) -> bool {
        let (l, r) = self.tail_slopes();
        l <= 0.0 && r >= 0.0
    }
}

/// `psi_minus` used when none is supplied for a weakly convex potential.
pub fn default_minus_profile(knot_count: usize) -> Vec<f64> {
    let n = knot_count.saturating_sub(1);
    let width = DEFAULT_MINUS_SUPPORT.min(n);
    let start = (n - width) / 2;
    (0..n)
        .map(|i| if i >= start && i < start + width { 1.0 } else { 0.0 })
        .collect()
}

/// Clamps raw coefficients into `[0, 1]`.
pub fn project_coefficients(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Piecewise-linear `s(sigma)` on equally spaced knots, clamped outside.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseScaling {
    sigma_max: f64,
    values: Vec<f64>,
}

impl NoiseScaling {
    /// Knots are equally spaced on `[0, sigma_max]`, one per value.
    pub fn new(values: Vec<f64>, sigma_max: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("noise scaling needs at least two knots"));
        }
        if !(sigma_max.is_finite() && sigma_max > 0.0) {
            return Err(Error::invalid("noise scaling range must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("noise scaling knots".into()));
        }
        Ok(NoiseScaling { sigma_max, values })
    }

    /// Constant `s` on the default 11 knots over `[0, 30/255]`.
    pub fn constant(s: f64) -> Self {
        NoiseScaling {
            sigma_max: SIGMA_MAX,
            values: vec![s; DEFAULT_ALPHA_KNOTS],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn knot(&self, j: usize) -> f64 {
        self.sigma_max * j as f64 / (self.values.len() - 1) as f64
    }

    /// Interpolation weights: `s(sigma) = w0 * values[j] + w1 * values[j + 1]`.
    pub fn weights(&self, sigma: f64) -> (usize, f64, f64) {
        let segments = self.values.len() - 1;
        if sigma <= 0.0 {
            return (0, 1.0, 0.0);
        }
        if sigma >= self.sigma_max {
            return (segments - 1, 0.0, 1.0);
        }
        let pos = sigma / self.sigma_max * segments as f64;
        let j = (pos.floor() as usize).min(segments - 1);
        let frac = pos - j as f64;
        (j, 1.0 - frac, frac)
    }

    pub fn eval(&self, sigma: f64) -> f64 {
        let (j, w0, w1) = self.weights(sigma);
        w0 * self.values[j] + w1 * self.values[j + 1]
    }

    /// `exp(s(sigma)) / (sigma + 1e-5)`.
    pub fn alpha(&self, sigma: f64) -> Result<f64> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::invalid(format!("noise level must be finite and >= 0, got {sigma}")));
        }
        Ok(self.eval(sigma).exp() / (sigma + ALPHA_SIGMA_SHIFT))
    }

    /// Knot values for which `alpha(sigma) == target` at the given noise level.
    pub fn calibrated_for(target: f64, sigma: f64) -> Self {
        Self::constant((target * (sigma + ALPHA_SIGMA_SHIFT)).ln())
    }
}

pub fn noise_alpha(scaling: &NoiseScaling, sigma: f64) -> Result<f64> {
    scaling.alpha(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_potential(seed: u64, convexity: Convexity) -> SplinePotential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plus: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        SplinePotential::with_default_minus(101, 0.002, plus, rng.gen_range(0.5..2.0), convexity)
            .unwrap()
    }

    /// Independent double integration of the stored second derivative,
    /// trapezoid rule with the jump points averaged.
    fn trapezoid_oracle(p: &SplinePotential, x: f64, step: f64) -> f64 {
        let second = |t: f64| -> f64 {
            let pos = (t - p.left()) / p.spacing();
            let nearest = pos.round();
            let lookup = |i: isize| -> f64 {
                if i < 0 || i as usize >= p.interval_count() {
                    0.0
                } else {
                    let i = i as usize;
                    p.mu() * p.psi_plus()[i] - p.convexity().c_cvx() * p.psi_minus()[i]
                }
            };
            if (pos - nearest).abs() < 1e-9 {
                0.5 * (lookup(nearest as isize - 1) + lookup(nearest as isize))
            } else {
                lookup(pos.floor() as isize)
            }
        };
        let n = (x.abs() / step).round() as usize;
        let h = x / n as f64;
        let mut slope = 0.0;
        let mut value = 0.0;
        // one-sided at the origin: only the side being integrated counts
        let mut prev_second = second(1e-3 * h);
        for k in 1..=n {
            let t = k as f64 * h;
            let s = second(t);
            let new_slope = slope + 0.5 * h * (prev_second + s);
            value += 0.5 * h * (slope + new_slope);
            slope = new_slope;
            prev_second = s;
        }
        value
    }

    #[test]
    fn zero_potential_is_identically_zero() {
        let p = SplinePotential::zero(101, 0.002).unwrap();
        for x in [-1.0, -0.05, 0.0, 0.013, 0.3] {
            let v = p.eval(x).unwrap();
            assert_eq!(v.value, 0.0);
            assert_eq!(v.first_deriv, 0.0);
        }
    }

    #[test]
    fn pure_quadratic_inside_range() {
        let p = SplinePotential::quadratic(101, 0.002, 1.0).unwrap();
        for x in [-0.0999, -0.03, 0.0, 0.0137, 0.07] {
            let v = p.eval(x).unwrap();
            assert!((v.value - x * x / 2.0).abs() < 1e-15, "{x}");
            assert!((v.first_deriv - x).abs() < 1e-15);
            assert_eq!(v.second_deriv, 1.0);
        }
    }

    #[test]
    fn matches_double_integration_oracle() {
        for seed in 0..4 {
            let p = random_potential(seed, Convexity::Convex);
            let x = 0.0137;
            let oracle = trapezoid_oracle(&p, x, 1e-6);
            let got = p.eval(x).unwrap().value;
            assert!((got - oracle).abs() < 1e-10, "seed {seed}: {got} vs {oracle}");
            let neg = trapezoid_oracle(&p, -x, 1e-6);
            assert!((p.eval(-x).unwrap().value - neg).abs() < 1e-10);
        }
    }

    #[test]
    fn calibration_fixes_origin() {
        for convexity in [Convexity::Convex, Convexity::WeaklyConvex] {
            let p = random_potential(11, convexity);
            let v = p.eval(0.0).unwrap();
            assert!(v.first_deriv.abs() < 1e-15);
            if convexity == Convexity::Convex {
                assert!(v.value.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nonnegative_on_knot_range_and_tails() {
        for seed in 0..6 {
            for convexity in [Convexity::Convex, Convexity::WeaklyConvex] {
                let p = random_potential(seed, convexity);
                if !p.is_bounded_below() {
                    continue;
                }
                for k in -2000..=2000 {
                    let x = k as f64 * 1e-4;
                    assert!(p.eval(x).unwrap().value >= -1e-15, "seed {seed} x {x}");
                }
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_alpha() {
        let p = SplinePotential::quadratic(101, 0.002, 1.0).unwrap();
        assert!(p.eval(f64::NAN).is_err());
        assert!(p.eval(f64::INFINITY).is_err());
        assert!(p.scaled_eval(0.0, 0.1).is_err());
        assert!(p.scaled_eval(-1.0, 0.1).is_err());
    }

    #[test]
    fn rejects_out_of_box_coefficients() {
        let mut plus = vec![0.5; 100];
        plus[3] = 1.5;
        assert!(SplinePotential::new(101, 0.002, plus, vec![0.0; 100], 1.0, Convexity::Convex).is_err());
        assert!(SplinePotential::new(101, 0.002, vec![0.0; 99], vec![0.0; 100], 1.0, Convexity::Convex).is_err());
    }

    #[test]
    fn scaled_eval_identities() {
        let p = random_potential(3, Convexity::WeaklyConvex);
        let x = 0.01;
        let base = p.eval(x).unwrap();
        let (v, d) = p.scaled_eval(1.0, x).unwrap();
        assert_eq!((v, d), (base.value, base.first_deriv));

        let alpha = 3.7;
        let inner = p.eval(alpha * x).unwrap();
        let (v, d) = p.scaled_eval(alpha, x).unwrap();
        assert!((v - inner.value / (alpha * alpha)).abs() < 1e-18);
        assert!((d - inner.first_deriv / alpha).abs() < 1e-18);

        let q = SplinePotential::quadratic(101, 0.002, 1.0).unwrap();
        for alpha in [0.5, 1.0, 2.0, 7.5] {
            let (v, _) = q.scaled_eval(alpha, 0.01).unwrap();
            assert!((v - 0.01 * 0.01 / 2.0).abs() < 1e-16);
        }
    }

    #[test]
    fn noise_alpha_examples() {
        let s0 = NoiseScaling::constant(0.0);
        assert!((noise_alpha(&s0, 0.0).unwrap() - 1e5).abs() < 1e-9);
        assert!((noise_alpha(&s0, 1e-5).unwrap() - 5e4).abs() < 1e-9);

        let mut values = vec![0.0; 11];
        for (j, v) in values.iter_mut().enumerate() {
            *v = -1.0 + 2.0 * j as f64 / 10.0;
        }
        let s = NoiseScaling::new(values, SIGMA_MAX).unwrap();
        let sigma = 15.0 / 255.0;
        let expected = 1.0 / (sigma + 1e-5);
        assert!((noise_alpha(&s, sigma).unwrap() - expected).abs() < 1e-9 * expected);
        // clamped beyond the last knot
        assert_eq!(s.eval(1.0), 1.0);
        assert!(noise_alpha(&s, -0.1).is_err());
    }

    #[test]
    fn calibrated_scaling_hits_target() {
        let s = NoiseScaling::calibrated_for(2.5, 0.1);
        assert!((s.alpha(0.1).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_coefficients(&[-0.5, 0.3, 2.0]), vec![0.0, 0.3, 1.0]);
        let feasible = vec![0.0, 0.25, 1.0];
        assert_eq!(project_coefficients(&feasible), feasible);
        let once = project_coefficients(&[3.0, -2.0, 0.7]);
        assert_eq!(project_coefficients(&once), once);
    }

    #[test]
    fn slope_basis_reproduces_slope() {
        let p = random_potential(5, Convexity::WeaklyConvex);
        for v in [-0.3, -0.0571, -0.002, 0.0, 0.0013, 0.05, 0.25] {
            let mut acc = vec![0.0; p.interval_count()];
            p.accumulate_slope_basis(v, 1.0, &mut acc);
            let rebuilt: f64 = acc.iter().zip(p.coeffs()).map(|(b, a)| b * a).sum();
            assert!((rebuilt - p.eval(v).unwrap().first_deriv).abs() < 1e-14, "{v}");
        }
    }

    #[test]
    fn default_minus_is_centered() {
        let m = default_minus_profile(101);
        assert_eq!(m.iter().filter(|v| **v == 1.0).count(), 21);
        assert_eq!(m[49], 1.0);
        assert_eq!(m[50], 1.0);
        assert_eq!(m[39], 1.0);
        assert_eq!(m[38], 0.0);
        assert_eq!(m[59], 1.0);
        assert_eq!(m[60], 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn potential_strategy(convexity: Convexity) -> impl Strategy<Value = SplinePotential> {
            (prop::collection::vec(0.0..=1.0f64, 100), 0.1..3.0f64).prop_map(move |(plus, mu)| {
                SplinePotential::with_default_minus(101, 0.002, plus, mu, convexity).unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn central_difference_is_second_order(p in potential_strategy(Convexity::WeaklyConvex), x in -0.12..0.12f64) {
                let fd = |h: f64| (p.eval(x + h).unwrap().value - p.eval(x - h).unwrap().value) / (2.0 * h);
                let d = p.eval(x).unwrap().first_deriv;
                // slope is piecewise linear and continuous, so the central
                // difference is exact up to the jump in psi'' times h.
                let bound = |h: f64| p.sup_abs_second_deriv() * h + 1e-9;
                prop_assert!((fd(1e-4) - d).abs() <= bound(1e-4));
                prop_assert!((fd(1e-5) - d).abs() <= bound(1e-5));
            }

            #[test]
            fn convex_slope_is_monotone(p in potential_strategy(Convexity::Convex)) {
                let mut prev = f64::NEG_INFINITY;
                for k in 0..10_000 {
                    let x = -0.15 + 0.3 * k as f64 / 9_999.0;
                    let d = p.eval(x).unwrap().first_deriv;
                    prop_assert!(d >= prev - 1e-15);
                    prev = d;
                }
            }

            #[test]
            fn weakly_convex_plus_quadratic_is_convex(p in potential_strategy(Convexity::WeaklyConvex)) {
                let mut prev = f64::NEG_INFINITY;
                for k in 0..10_000 {
                    let x = -0.15 + 0.3 * k as f64 / 9_999.0;
                    let d = p.eval(x).unwrap().first_deriv + x;
                    prop_assert!(d >= prev - 1e-15);
                    prev = d;
                    prop_assert!(p.eval(x).unwrap().second_deriv > -1.0 - 1e-15);
                }
            }

            #[test]
            fn growth_beyond_range_is_linear(p in potential_strategy(Convexity::Convex)) {
                let (l, r) = p.tail_slopes();
                let edge_r = p.eval(p.right()).unwrap().value - r * p.right();
                let edge_l = p.eval(p.left()).unwrap().value - l * p.left();
                for x in [0.2, 1.0, 10.0, 1e3] {
                    prop_assert!((p.eval(x).unwrap().value - r * x - edge_r).abs() < 1e-9 * x.max(1.0));
                    prop_assert!((p.eval(-x).unwrap().value + l * x - edge_l).abs() < 1e-9 * x.max(1.0));
                }
            }
        }
    }
}
