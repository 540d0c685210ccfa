use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Paper-scale CT constants: mean photon count per bin and attenuation normalization.
pub const CT_PHOTON_COUNT: f64 = 4096.0;
pub const CT_ATTENUATION: f64 = 81.35858;
/// Below `t = -CT_EXPONENT_CAP / mu_ct` the CT term continues as its
/// second-order Taylor expansion so exponentials stay finite.
const CT_EXPONENT_CAP: f64 = 30.0;

/// Data-fidelity term `D(Hx, y)`, evaluated on `t = Hx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fidelity {
    /// `1/(2 sigma^2) ||t - y||^2`.
    ScaledQuadratic { sigma: f64 },
    /// Negative Poisson log-likelihood of log-transformed counts,
    /// `sum_i exp(-mu t_i) N0 + exp(-mu y_i) N0 (mu t_i - log N0)`.
    CtPoisson { n0: f64, mu_ct: f64 },
}

impl Fidelity {
    pub fn quadratic(sigma: f64) -> Result<Self> {
        let f = Fidelity::ScaledQuadratic { sigma };
        f.validate()?;
        Ok(f)
    }

    pub fn ct_poisson(n0: f64, mu_ct: f64) -> Result<Self> {
        let f = Fidelity::CtPoisson { n0, mu_ct };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Fidelity::ScaledQuadratic { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::invalid(format!("fidelity sigma must be positive, got {sigma}")));
                }
            }
            Fidelity::CtPoisson { n0, mu_ct } => {
                if !(n0.is_finite() && n0 > 0.0) {
                    return Err(Error::invalid(format!("photon count N0 must be positive, got {n0}")));
                }
                if !(mu_ct.is_finite() && mu_ct > 0.0) {
                    return Err(Error::invalid(format!("attenuation constant must be positive, got {mu_ct}")));
                }
            }
        }
        Ok(())
    }

    fn check(&self, hx: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
        self.validate()?;
        if hx.dim() != y.dim() {
            return Err(Error::shape(y.dim(), hx.dim()));
        }
        Ok(())
    }

    /// Per-bin value, slope and curvature of the CT term.
    #[inline]
    fn ct_bin(n0: f64, mu: f64, t: f64, y: f64) -> (f64, f64, f64) {
        let data = (-mu * y).exp() * n0;
        let floor = -CT_EXPONENT_CAP / mu;
        if t >= floor {
            let e = (-mu * t).exp() * n0;
            (e + data * (mu * t - n0.ln()), -mu * e + mu * data, mu * mu * e)
        } else {
            let e = (-mu * floor).exp() * n0;
            let (v0, d0, c0) = (e + data * (mu * floor - n0.ln()), -mu * e + mu * data, mu * mu * e);
            let dt = t - floor;
            (v0 + d0 * dt + 0.5 * c0 * dt * dt, d0 + c0 * dt, c0)
        }
    }

    pub fn value(&self, hx: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
        self.check(hx, y)?;
        Ok(self.value_unchecked(hx, y))
    }

    pub(crate) fn value_unchecked(&self, hx: &Array2<f64>, y: &Array2<f64>) -> f64 {
        match *self {
            Fidelity::ScaledQuadratic { sigma } => {
                let ss: f64 = hx.iter().zip(y.iter()).map(|(t, d)| (t - d) * (t - d)).sum();
                0.5 * ss / (sigma * sigma)
            }
            Fidelity::CtPoisson { n0, mu_ct } => hx
                .iter()
                .zip(y.iter())
                .map(|(t, d)| Self::ct_bin(n0, mu_ct, *t, *d).0)
                .sum(),
        }
    }

    /// Gradient with respect to `t = Hx`.
    pub fn gradient(&self, hx: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(hx, y)?;
        Ok(self.gradient_unchecked(hx, y))
    }

    pub(crate) fn gradient_unchecked(&self, hx: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        match *self {
            Fidelity::ScaledQuadratic { sigma } => {
                let inv = 1.0 / (sigma * sigma);
                Zip::from(hx).and(y).map_collect(|t, d| (t - d) * inv)
            }
            Fidelity::CtPoisson { n0, mu_ct } => Zip::from(hx).and(y).map_collect(|t, d| Self::ct_bin(n0, mu_ct, *t, *d).1),
        }
    }

    /// Diagonal second derivative with respect to `t = Hx`.
    pub fn curvature(&self, hx: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(hx, y)?;
        Ok(self.curvature_unchecked(hx, y))
    }

    pub(crate) fn curvature_unchecked(&self, hx: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        match *self {
            Fidelity::ScaledQuadratic { sigma } => Array2::from_elem(hx.dim(), 1.0 / (sigma * sigma)),
            Fidelity::CtPoisson { n0, mu_ct } => Zip::from(hx).and(y).map_collect(|t, d| Self::ct_bin(n0, mu_ct, *t, *d).2),
        }
    }

    /// Lipschitz constant of the gradient on `{t : t >= t_min}`.
    pub fn lipschitz(&self, t_min: f64) -> f64 {
        match *self {
            Fidelity::ScaledQuadratic { sigma } => 1.0 / (sigma * sigma),
            Fidelity::CtPoisson { n0, mu_ct } => {
                let t = t_min.max(-CT_EXPONENT_CAP / mu_ct);
                mu_ct * mu_ct * n0 * (-mu_ct * t).exp()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_vanishes_on_data() {
        let f = Fidelity::quadratic(0.3).unwrap();
        let y = Array2::from_shape_fn((3, 4), |(i, j)| (i + 2 * j) as f64);
        assert_eq!(f.value(&y, &y).unwrap(), 0.0);
        assert!(f.gradient(&y, &y).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ct_gradient_vanishes_on_data() {
        let f = Fidelity::ct_poisson(CT_PHOTON_COUNT, CT_ATTENUATION).unwrap();
        let y = Array2::from_shape_fn((2, 5), |(i, j)| 0.001 * (i + j) as f64);
        assert!(f.gradient(&y, &y).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ct_gradient_matches_finite_differences() {
        let f = Fidelity::ct_poisson(CT_PHOTON_COUNT, CT_ATTENUATION).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.0..0.03));
        let y = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.0..0.03));
        let g = f.gradient(&t, &y).unwrap();
        let h = 1e-7;
        for idx in [(0, 0), (1, 2), (2, 1)] {
            let mut tp = t.clone();
            tp[idx] += h;
            let mut tm = t.clone();
            tm[idx] -= h;
            let fd = (f.value(&tp, &y).unwrap() - f.value(&tm, &y).unwrap()) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-5 * g[idx].abs().max(1.0), "{fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn ct_is_convex_and_finite_far_below_zero() {
        let f = Fidelity::ct_poisson(CT_PHOTON_COUNT, CT_ATTENUATION).unwrap();
        let y = Array2::from_elem((1, 1), 0.01);
        let at = |t: f64| f.value(&Array2::from_elem((1, 1), t), &y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = rng.gen_range(-1.0..0.2);
            let b = rng.gen_range(-1.0..0.2);
            let mid = at(0.5 * (a + b));
            assert!(mid <= 0.5 * (at(a) + at(b)) * (1.0 + 1e-12) + 1e-9);
        }
        assert!(at(-10.0).is_finite());
        let c = f.curvature(&Array2::from_elem((1, 1), 0.02), &y).unwrap()[(0, 0)];
        assert!((c - CT_ATTENUATION.powi(2) * CT_PHOTON_COUNT * (-CT_ATTENUATION * 0.02f64).exp()).abs() < 1e-6 * c);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(Fidelity::quadratic(0.0).is_err());
        assert!(Fidelity::ct_poisson(0.0, 1.0).is_err());
        assert!(Fidelity::ct_poisson(10.0, -1.0).is_err());
        let f = Fidelity::quadratic(1.0).unwrap();
        assert!(f.value(&Array2::zeros((2, 2)), &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn lipschitz_constants() {
        assert_eq!(Fidelity::quadratic(0.5).unwrap().lipschitz(0.0), 4.0);
        let ct = Fidelity::ct_poisson(4096.0, 2.0).unwrap();
        assert!((ct.lipschitz(0.0) - 4.0 * 4096.0).abs() < 1e-9);
    }
}
