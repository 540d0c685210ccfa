//! The masked ridge regularizer `R_y(x) = sum_c <Lambda_c, psi_c(W_c x)>` and mask providers.

use ndarray::{Array2, Array3, Axis};

use crate::conv;
use crate::error::{Error, Result};
use crate::filter_bank::FilterBank;
use crate::potentials::{NoiseScaling, SplinePotential};

pub const DEFAULT_EPSILON: f64 = 0.01;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("mask floor epsilon must lie in (0, 1), got {epsilon}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-channel, per-pixel weights in `[epsilon, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    weights: Array3<f64>,
    epsilon: f64,
}

impl SpatialMask {
    pub fn new(weights: Array3<f64>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if let Some(bad) = weights.iter().find(|w| !(epsilon..=1.0).contains(*w)) {
            return Err(Error::invalid(format!("mask weight {bad} outside [{epsilon}, 1]")));
        }
        Ok(SpatialMask {
            weights: weights.as_standard_layout().into_owned(),
            epsilon,
        })
    }

    /// Clamps arbitrary finite weights into `[epsilon, 1]`.
    pub fn clamped(weights: Array3<f64>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("mask weights".into()));
        }
        Self::new(weights.mapv(|w| w.clamp(epsilon, 1.0)), epsilon)
    }

    pub fn ones(n_channels: usize, dims: (usize, usize), epsilon: f64) -> Result<Self> {
        Self::new(Array3::ones((n_channels, dims.0, dims.1)), epsilon)
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_channels(&self) -> usize {
        self.weights.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.weights.dim();
        (h, w)
    }

    pub(crate) fn channel(&self, c: usize) -> &[f64] {
        let plane = self.dims().0 * self.dims().1;
        &self.weights.as_slice().unwrap()[c * plane..(c + 1) * plane]
    }
}

/// Mask from smoothed filter magnitudes of an initial reconstruction:
/// `m_c = eps + (1 - eps) * logistic(-gain * (box(|W_c x_est|) - threshold - offset_c))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResponse {
    pub gain: f64,
    pub threshold: f64,
    pub offsets: Vec<f64>,
    pub smoothing_width: usize,
}

/// Mask values together with their derivatives in the provider parameters.
#[derive(Debug, Clone)]
pub struct MaskPartials {
    pub mask: SpatialMask,
    /// `d m / d gain`.
    pub d_gain: Array3<f64>,
    /// `d m / d threshold`; also `d m_c / d offset_c` on channel `c`.
    pub d_threshold: Array3<f64>,
}

impl LocalResponse {
    pub fn new(gain: f64, threshold: f64, n_channels: usize, smoothing_width: usize) -> Self {
        LocalResponse {
            gain,
            threshold,
            offsets: vec![0.0; n_channels],
            smoothing_width,
        }
    }

    fn validate(&self, bank: &FilterBank) -> Result<()> {
        if self.offsets.len() != bank.n_channels() {
            return Err(Error::shape(bank.n_channels(), self.offsets.len()));
        }
        if ![self.gain, self.threshold].iter().chain(&self.offsets).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("mask provider parameters".into()));
        }
        Ok(())
    }

    /// Box-smoothed magnitudes `box(|W_c x_est|)`, one plane per channel.
    pub fn smoothed_responses(&self, x_est: &Array2<f64>, bank: &FilterBank) -> Result<Array3<f64>> {
        if x_est.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial reconstruction".into()));
        }
        let (h, w) = x_est.dim();
        let mut out = bank.apply(x_est)?;
        for mut plane in out.axis_iter_mut(Axis(0)) {
            let abs: Vec<f64> = plane.iter().map(|v| v.abs()).collect();
            let smooth = conv::box_mean(&abs, h, w, self.smoothing_width);
            plane.iter_mut().zip(smooth).for_each(|(slot, v)| *slot = v);
        }
        Ok(out)
    }

    pub fn partials(&self, x_est: &Array2<f64>, bank: &FilterBank, epsilon: f64) -> Result<MaskPartials> {
        check_epsilon(epsilon)?;
        self.validate(bank)?;
        let r = self.smoothed_responses(x_est, bank)?;
        let dim = r.dim();
        let mut mask = Array3::zeros(dim);
        let mut d_gain = Array3::zeros(dim);
        let mut d_threshold = Array3::zeros(dim);
        for ((c, i, j), &rv) in r.indexed_iter() {
            let shift = rv - self.threshold - self.offsets[c];
            let s = logistic(-self.gain * shift);
            let ds = (1.0 - epsilon) * s * (1.0 - s);
            mask[(c, i, j)] = (epsilon + (1.0 - epsilon) * s).clamp(epsilon, 1.0);
            d_gain[(c, i, j)] = -ds * shift;
            d_threshold[(c, i, j)] = ds * self.gain;
        }
        Ok(MaskPartials {
            mask: SpatialMask::new(mask, epsilon)?,
            d_gain,
            d_threshold,
        })
    }
}

/// Source of the spatial weights used in the second reconstruction stage.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskProvider {
    Constant,
    /// Fixed weights (e.g. loaded from disk); clamped into `[epsilon, 1]`.
    File(Array3<f64>),
    LocalResponse(LocalResponse),
}

impl MaskProvider {
    pub fn make_mask(&self, x_est: &Array2<f64>, bank: &FilterBank, epsilon: f64) -> Result<SpatialMask> {
        check_epsilon(epsilon)?;
        let dims = x_est.dim();
        match self {
            MaskProvider::Constant => SpatialMask::ones(bank.n_channels(), dims, epsilon),
            MaskProvider::File(weights) => {
                let expected = (bank.n_channels(), dims.0, dims.1);
                if weights.dim() != expected {
                    return Err(Error::shape(expected, weights.dim()));
                }
                SpatialMask::clamped(weights.clone(), epsilon)
            }
            MaskProvider::LocalResponse(lr) => Ok(lr.partials(x_est, bank, epsilon)?.mask),
        }
    }
}

pub fn make_mask(provider: &MaskProvider, x_est: &Array2<f64>, bank: &FilterBank, epsilon: f64) -> Result<SpatialMask> {
    provider.make_mask(x_est, bank, epsilon)
}

/// `R_y(x) = sum_c sum_p Lambda_c[p] alpha_c^-2 psi(alpha_c (W_c x)[p])`.
///
/// Without a mask the weights are one everywhere.
#[derive(Debug, Clone)]
pub struct AdaptiveRegularizer {
    bank: FilterBank,
    potential: SplinePotential,
    scalings: Vec<NoiseScaling>,
    sigma: f64,
    alphas: Vec<f64>,
    channel_bounds: Vec<f64>,
    mask: Option<SpatialMask>,
}

impl AdaptiveRegularizer {
    pub fn new(bank: FilterBank, potential: SplinePotential, scalings: Vec<NoiseScaling>, sigma: f64) -> Result<Self> {
        if scalings.len() != bank.n_channels() {
            return Err(Error::shape(bank.n_channels(), scalings.len()));
        }
        let alphas = scalings.iter().map(|s| s.alpha(sigma)).collect::<Result<Vec<_>>>()?;
        let channel_bounds = (0..bank.n_channels()).map(|c| bank.channel_norm_bound(c)).collect();
        Ok(AdaptiveRegularizer {
            bank,
            potential,
            scalings,
            sigma,
            alphas,
            channel_bounds,
            mask: None,
        })
    }

    /// Same model with `alpha_c = target` for every channel at noise level `sigma`.
    pub fn with_fixed_alpha(bank: FilterBank, potential: SplinePotential, alpha: f64, sigma: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        let scalings = vec![NoiseScaling::calibrated_for(alpha, sigma); bank.n_channels()];
        Self::new(bank, potential, scalings, sigma)
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        let alphas = self.scalings.iter().map(|s| s.alpha(sigma)).collect::<Result<Vec<_>>>()?;
        Ok(AdaptiveRegularizer {
            sigma,
            alphas,
            ..self.clone()
        })
    }

    pub fn with_potential(&self, potential: SplinePotential) -> Self {
        AdaptiveRegularizer {
            potential,
            ..self.clone()
        }
    }

    pub fn with_scalings(&self, scalings: Vec<NoiseScaling>) -> Result<Self> {
        let mut out = Self::new(self.bank.clone(), self.potential.clone(), scalings, self.sigma)?;
        out.mask = self.mask.clone();
        Ok(out)
    }

    pub fn with_mask(&self, mask: SpatialMask) -> Result<Self> {
        if mask.n_channels() != self.bank.n_channels() {
            return Err(Error::shape(self.bank.n_channels(), mask.n_channels()));
        }
        Ok(AdaptiveRegularizer {
            mask: Some(mask),
            ..self.clone()
        })
    }

    pub fn without_mask(&self) -> Self {
        AdaptiveRegularizer {
            mask: None,
            ..self.clone()
        }
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn potential(&self) -> &SplinePotential {
        &self.potential
    }

    pub fn scalings(&self) -> &[NoiseScaling] {
        &self.scalings
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn mask(&self) -> Option<&SpatialMask> {
        self.mask.as_ref()
    }

    pub fn n_channels(&self) -> usize {
        self.bank.n_channels()
    }

    /// True when the potential vanishes, so `R` is identically zero.
    pub fn is_zero(&self) -> bool {
        self.potential.coeffs().iter().all(|a| *a == 0.0)
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.is_empty() {
            return Err(Error::invalid("empty image"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regularizer argument".into()));
        }
        if let Some(mask) = &self.mask {
            if mask.dims() != x.dim() {
                return Err(Error::shape(mask.dims(), x.dim()));
            }
        }
        Ok(())
    }

    #[inline]
    fn weight(&self, c: usize, p: usize) -> f64 {
        match &self.mask {
            Some(m) => m.channel(c)[p],
            None => 1.0,
        }
    }

    fn response(&self, c: usize, xs: &[f64], dims: (usize, usize)) -> Vec<f64> {
        let mut u = vec![0.0; xs.len()];
        self.bank.apply_channel_add(c, xs, dims, &mut u);
        u
    }

    pub fn evaluate(&self, x: &Array2<f64>) -> Result<f64> {
        self.check(x)?;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let dims = x.dim();
        let mut total = 0.0;
        for c in 0..self.n_channels() {
            let alpha = self.alphas[c];
            let inv2 = 1.0 / (alpha * alpha);
            let u = self.response(c, xs, dims);
            total += u
                .iter()
                .enumerate()
                .map(|(p, v)| self.weight(c, p) * self.potential.eval_unchecked(alpha * v).value * inv2)
                .sum::<f64>();
        }
        Ok(total)
    }

    /// `psi_c((W_c x)[p])` per channel and pixel, unweighted.
    pub fn potential_values(&self, x: &Array2<f64>) -> Result<Array3<f64>> {
        self.check(x)?;
        let mut out = self.bank.apply(x)?;
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let alpha = self.alphas[c];
            plane.mapv_inplace(|v| self.potential.eval_unchecked(alpha * v).value / (alpha * alpha));
        }
        Ok(out)
    }

    pub fn gradient(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.value_and_gradient(x)?.1)
    }

    pub fn value_and_gradient(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        self.check(x)?;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let dims = x.dim();
        let mut total = 0.0;
        let mut grad = vec![0.0; xs.len()];
        for c in 0..self.n_channels() {
            let alpha = self.alphas[c];
            let mut u = self.response(c, xs, dims);
            for (p, v) in u.iter_mut().enumerate() {
                let pv = self.potential.eval_unchecked(alpha * *v);
                let m = self.weight(c, p);
                total += m * pv.value / (alpha * alpha);
                *v = m * pv.first_deriv / alpha;
            }
            self.bank.adjoint_channel_add(c, &u, dims, &mut grad);
        }
        Ok((total, Array2::from_shape_vec(dims, grad).unwrap()))
    }

    /// Diagonal curvature `Lambda_c * psi''(alpha_c W_c x)` per channel, for
    /// repeated Hessian products at a fixed point.
    pub fn curvature(&self, x: &Array2<f64>) -> Result<Array3<f64>> {
        self.check(x)?;
        let mut out = self.bank.apply(x)?;
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let alpha = self.alphas[c];
            for (p, v) in plane.iter_mut().enumerate() {
                *v = self.weight(c, p) * self.potential.eval_unchecked(alpha * *v).second_deriv;
            }
        }
        Ok(out)
    }

    /// `sum_c W_c^T (curv_c * W_c v)` with `curv` from [`Self::curvature`].
    pub fn hessian_vec_with(&self, curvature: &Array3<f64>, v: &Array2<f64>) -> Array2<f64> {
        let dims = v.dim();
        let v = v.as_standard_layout();
        let vs = v.as_slice().unwrap();
        let curv = curvature.as_standard_layout();
        let plane = dims.0 * dims.1;
        let cs = curv.as_slice().unwrap();
        let mut out = vec![0.0; plane];
        for c in 0..self.n_channels() {
            let mut wv = self.response(c, vs, dims);
            wv.iter_mut().zip(&cs[c * plane..(c + 1) * plane]).for_each(|(a, k)| *a *= k);
            self.bank.adjoint_channel_add(c, &wv, dims, &mut out);
        }
        Array2::from_shape_vec(dims, out).unwrap()
    }

    /// Hessian-vector product `nabla^2 R(x) v`.
    pub fn hessian_vec(&self, x: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
        if v.dim() != x.dim() {
            return Err(Error::shape(x.dim(), v.dim()));
        }
        let curv = self.curvature(x)?;
        Ok(self.hessian_vec_with(&curv, v))
    }

    /// `sum_c sup|psi''| ||W_c||^2`, a Lipschitz constant of the gradient for
    /// every mask with weights at most one.
    pub fn lipschitz_gradient_bound(&self) -> f64 {
        let sup = self.potential.sup_abs_second_deriv();
        self.channel_bounds.iter().map(|b| sup * b * b).sum()
    }

    /// Grid-independent bounds on `||W_c||_2`.
    pub fn channel_bounds(&self) -> &[f64] {
        &self.channel_bounds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{Convexity, DEFAULT_KNOT_COUNT, DEFAULT_SPACING};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quadratic_dirac() -> AdaptiveRegularizer {
        let potential = SplinePotential::quadratic(DEFAULT_KNOT_COUNT, DEFAULT_SPACING, 1.0).unwrap();
        AdaptiveRegularizer::with_fixed_alpha(FilterBank::dirac(3).unwrap(), potential, 1.0, 0.1).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, convexity: Convexity) -> AdaptiveRegularizer {
        let kernels = (0..3)
            .map(|_| Array2::from_shape_fn((3, 3), |_| rng.gen::<f64>() - 0.5))
            .collect();
        let (bank, _) = FilterBank::new(kernels).unwrap().normalize_spectral(1e-8, 500).unwrap();
        let plus = (0..DEFAULT_KNOT_COUNT - 1).map(|_| rng.gen()).collect();
        let potential = SplinePotential::with_default_minus(DEFAULT_KNOT_COUNT, DEFAULT_SPACING, plus, 1.5, convexity).unwrap();
        let scalings = (0..3).map(|_| NoiseScaling::constant(rng.gen_range(-3.0..-1.0))).collect();
        AdaptiveRegularizer::new(bank, potential, scalings, 0.05).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, dims: (usize, usize), eps: f64) -> SpatialMask {
        SpatialMask::new(Array3::from_shape_fn((3, dims.0, dims.1), |_| rng.gen_range(eps..=1.0)), eps).unwrap()
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        diff / b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_image_has_zero_value_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::zeros((6, 7));
        let reg = random_model(&mut rng, Convexity::Convex);
        assert_eq!(reg.evaluate(&x).unwrap(), 0.0);
        assert!(reg.gradient(&x).unwrap().iter().all(|v| *v == 0.0));
        // a weakly convex profile may dip below zero near the origin; the
        // nonnegativity lift then shows up as a constant, the slope stays zero
        let reg = random_model(&mut rng, Convexity::WeaklyConvex);
        let lift = reg.potential().eval(0.0).unwrap().value;
        let expected = x.len() as f64 * reg.alphas().iter().map(|a| lift / (a * a)).sum::<f64>();
        assert!((reg.evaluate(&x).unwrap() - expected).abs() < 1e-12);
        assert!(reg.gradient(&x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_dirac_is_half_squared_norm() {
        let reg = quadratic_dirac();
        let x = Array2::from_shape_fn((5, 5), |(i, j)| 0.01 * (i as f64 - 2.0 * j as f64));
        let expected = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        assert!((reg.evaluate(&x).unwrap() - expected).abs() < 1e-15);
        let g = reg.gradient(&x).unwrap();
        assert!(g.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reg = random_model(&mut rng, Convexity::WeaklyConvex);
        let mask = random_mask(&mut rng, (8, 8), 0.01);
        let reg = reg.with_mask(mask.clone()).unwrap();
        let x = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-0.05..0.05));
        let mut expected = 0.0;
        for c in 0..3 {
            let k = reg.bank().kernel(c);
            let alpha = reg.alphas()[c];
            for i in 0..8isize {
                for j in 0..8isize {
                    let mut u = 0.0;
                    for a in 0..3isize {
                        for b in 0..3isize {
                            let (si, sj) = (i + a - 1, j + b - 1);
                            if (0..8).contains(&si) && (0..8).contains(&sj) {
                                u += k[(a as usize, b as usize)] * x[(si as usize, sj as usize)];
                            }
                        }
                    }
                    let psi = reg.potential().eval(alpha * u).unwrap().value / (alpha * alpha);
                    expected += mask.weights()[(c, i as usize, j as usize)] * psi;
                }
            }
        }
        let got = reg.evaluate(&x).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for convexity in [Convexity::Convex, Convexity::WeaklyConvex] {
            let reg = random_model(&mut rng, convexity);
            let reg = reg.with_mask(random_mask(&mut rng, (6, 6), 0.01)).unwrap();
            let x = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-0.05..0.05));
            let g = reg.gradient(&x).unwrap();
            let h = 1e-5;
            let fd = Array2::from_shape_fn((6, 6), |idx| {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                (reg.evaluate(&xp).unwrap() - reg.evaluate(&xm).unwrap()) / (2.0 * h)
            });
            assert!(rel_err(&fd, &g) <= 1e-6, "{:?}: {}", convexity, rel_err(&fd, &g));
        }
    }

    #[test]
    fn hessian_vec_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reg = random_model(&mut rng, Convexity::WeaklyConvex);
        let x = Array2::from_shape_fn((7, 7), |_| rng.gen_range(-0.05..0.05));
        let v = Array2::from_shape_fn((7, 7), |_| rng.gen_range(-1.0..1.0));
        let hv = reg.hessian_vec(&x, &v).unwrap();
        let t = 1e-9;
        let fd = (reg.gradient(&(&x + &(&v * t))).unwrap() - reg.gradient(&(&x - &(&v * t))).unwrap()) / (2.0 * t);
        assert!(rel_err(&fd, &hv) <= 1e-4, "{}", rel_err(&fd, &hv));
    }

    #[test]
    fn lipschitz_bound_examples() {
        let zero = SplinePotential::zero(DEFAULT_KNOT_COUNT, DEFAULT_SPACING).unwrap();
        let reg = AdaptiveRegularizer::with_fixed_alpha(FilterBank::dirac(3).unwrap(), zero, 1.0, 0.1).unwrap();
        assert_eq!(reg.lipschitz_gradient_bound(), 0.0);
        assert!((quadratic_dirac().lipschitz_gradient_bound() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_bound_dominates_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reg = random_model(&mut rng, Convexity::WeaklyConvex);
        let bound = reg.lipschitz_gradient_bound();
        for _ in 0..100 {
            let x1 = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-0.1..0.1));
            let x2 = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-0.1..0.1));
            let dg = reg.gradient(&x1).unwrap() - reg.gradient(&x2).unwrap();
            let dx = &x1 - &x2;
            let ratio = dg.iter().map(|v| v * v).sum::<f64>().sqrt() / dx.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(ratio <= bound, "{ratio} > {bound}");
        }
    }

    #[test]
    fn mask_shape_is_checked() {
        let reg = quadratic_dirac();
        let reg = reg.with_mask(SpatialMask::ones(1, (4, 4), 0.01).unwrap()).unwrap();
        assert!(reg.evaluate(&Array2::zeros((4, 5))).is_err());
        assert!(reg.evaluate(&Array2::from_elem((4, 4), f64::NAN)).is_err());
        assert!(quadratic_dirac().with_mask(SpatialMask::ones(2, (4, 4), 0.01).unwrap()).is_err());
    }

    #[test]
    fn constant_provider_gives_ones() {
        let bank = FilterBank::dct(4, 3).unwrap();
        let x = Array2::from_shape_fn((6, 6), |(i, j)| (i * j) as f64);
        let m = MaskProvider::Constant.make_mask(&x, &bank, 0.01).unwrap();
        assert!(m.weights().iter().all(|v| *v == 1.0));
        assert!(MaskProvider::Constant.make_mask(&x, &bank, 0.0).is_err());
        assert!(MaskProvider::Constant.make_mask(&x, &bank, 1.0).is_err());
    }

    #[test]
    fn file_provider_clamps_and_checks_shape() {
        let bank = FilterBank::dct(2, 3).unwrap();
        let x = Array2::zeros((3, 3));
        let raw = Array3::from_shape_fn((2, 3, 3), |(c, i, _)| c as f64 * 2.0 - i as f64);
        let m = MaskProvider::File(raw).make_mask(&x, &bank, 0.05).unwrap();
        assert!(m.weights().iter().all(|v| (0.05..=1.0).contains(v)));
        assert_eq!(m.weights()[(0, 2, 0)], 0.05);
        assert_eq!(m.weights()[(1, 0, 0)], 1.0);
        assert!(MaskProvider::File(Array3::ones((2, 3, 4))).make_mask(&x, &bank, 0.05).is_err());
    }

    #[test]
    fn local_response_on_zero_image_is_constant() {
        let bank = FilterBank::dct(3, 3).unwrap();
        let lr = LocalResponse::new(40.0, 0.05, 3, 3);
        let eps = 0.01;
        let m = MaskProvider::LocalResponse(lr).make_mask(&Array2::zeros((5, 5)), &bank, eps).unwrap();
        let expected = eps + (1.0 - eps) * logistic(40.0 * 0.05);
        assert!(m.weights().iter().all(|v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn local_response_dampens_edges() {
        let bank = FilterBank::new(vec![ndarray::array![[0.0, 0.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 0.0]]]).unwrap();
        let x = Array2::from_shape_fn((9, 10), |(_, j)| if j >= 5 { 1.0 } else { 0.0 });
        let lr = LocalResponse::new(20.0, 0.2, 1, 1);
        let m = MaskProvider::LocalResponse(lr).make_mask(&x, &bank, 0.01).unwrap();
        for i in 1..8 {
            assert!(m.weights()[(0, i, 5)] < m.weights()[(0, i, 2)]);
            assert!(m.weights()[(0, i, 5)] < m.weights()[(0, i, 8)]);
        }
    }

    #[test]
    fn local_response_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = FilterBank::dct(3, 3).unwrap();
        let x = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>());
        let mut lr = LocalResponse::new(5.0, 0.3, 3, 3);
        lr.offsets = vec![0.1, -0.2, 0.05];
        let p = lr.partials(&x, &bank, 0.01).unwrap();
        let h = 1e-6;
        let mut plus = lr.clone();
        plus.gain += h;
        let mut minus = lr.clone();
        minus.gain -= h;
        let fd = (plus.partials(&x, &bank, 0.01).unwrap().mask.weights() - minus.partials(&x, &bank, 0.01).unwrap().mask.weights()) / (2.0 * h);
        assert!(fd.iter().zip(p.d_gain.iter()).all(|(a, b)| (a - b).abs() < 1e-7));
        let mut plus = lr.clone();
        plus.threshold += h;
        let mut minus = lr.clone();
        minus.threshold -= h;
        let fd = (plus.partials(&x, &bank, 0.01).unwrap().mask.weights() - minus.partials(&x, &bank, 0.01).unwrap().mask.weights()) / (2.0 * h);
        assert!(fd.iter().zip(p.d_threshold.iter()).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    mod properties {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn smaller_mask_gives_smaller_cost(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let reg = random_model(&mut rng, Convexity::Convex);
                let lo = random_mask(&mut rng, (6, 6), 0.01);
                let hi = SpatialMask::new(lo.weights().mapv(|w| (w + 0.3).min(1.0)), 0.01).unwrap();
                let x = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-0.2..0.2));
                let a = reg.with_mask(lo).unwrap().evaluate(&x).unwrap();
                let b = reg.with_mask(hi).unwrap().evaluate(&x).unwrap();
                prop_assert!(a <= b);
            }

            #[test]
            fn epsilon_floor_dominates(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let reg = random_model(&mut rng, Convexity::WeaklyConvex);
                let eps = rng.gen_range(0.001..0.5);
                let mask = random_mask(&mut rng, (6, 6), eps);
                let x = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-0.2..0.2));
                let full = reg.evaluate(&x).unwrap();
                let masked = reg.with_mask(mask).unwrap().evaluate(&x).unwrap();
                prop_assert!(masked >= eps * full - 1e-12 * full.abs().max(1.0));
            }

            #[test]
            fn convex_model_is_midpoint_convex(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let reg = random_model(&mut rng, Convexity::Convex);
                let reg = reg.with_mask(random_mask(&mut rng, (5, 5), 0.01)).unwrap();
                let a = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-0.2..0.2));
                let b = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-0.2..0.2));
                let mid = (&a + &b) * 0.5;
                let lhs = reg.evaluate(&mid).unwrap();
                let rhs = 0.5 * (reg.evaluate(&a).unwrap() + reg.evaluate(&b).unwrap());
                prop_assert!(lhs <= rhs + 1e-10);
            }

            #[test]
            fn gradient_consistent_for_every_mask_kind(seed in 0u64..1000, kind in 0usize..3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let reg = random_model(&mut rng, Convexity::WeaklyConvex);
                let x_est = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-0.1..0.1));
                let provider = match kind {
                    0 => MaskProvider::Constant,
                    1 => MaskProvider::File(Array3::from_shape_fn((3, 6, 6), |_| rng.gen())),
                    _ => MaskProvider::LocalResponse(LocalResponse::new(30.0, 0.02, 3, 3)),
                };
                let mask = provider.make_mask(&x_est, reg.bank(), 0.01).unwrap();
                let reg = reg.with_mask(mask).unwrap();
                let x = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-0.05..0.05));
                let d = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
                let g = reg.gradient(&x).unwrap();
                let h = 1e-6;
                let fd = (reg.evaluate(&(&x + &(&d * h))).unwrap() - reg.evaluate(&(&x - &(&d * h))).unwrap()) / (2.0 * h);
                let exact = (&g * &d).sum();
                prop_assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1e-3));
            }
        }
    }
}
