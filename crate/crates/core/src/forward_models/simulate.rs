use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::LinearOperator;
use crate::error::{Error, Result};

/// Measurement noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    /// `y = Hx + sigma * n`, `n` standard normal.
    Gaussian { sigma: f64 },
    /// Poisson counts with mean `N0 exp(-mu Hx)`, log-transformed back;
    /// zero counts are clamped to one.
    CtPoisson { n0: f64, mu_ct: f64 },
}

/// Simulates data `y` from a ground truth; identical seeds give identical data.
pub fn simulate_data<O: LinearOperator + ?Sized>(
    op: &O,
    x_true: &Array2<f64>,
    noise: NoiseSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    let clean = op.apply(x_true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match noise {
        NoiseSpec::Gaussian { sigma } => {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
            }
            if sigma == 0.0 {
                return Ok(clean);
            }
            Ok(clean.mapv(|v| {
                let n: f64 = StandardNormal.sample(&mut rng);
                v + sigma * n
            }))
        }
        NoiseSpec::CtPoisson { n0, mu_ct } => {
            if !(n0 > 0.0 && mu_ct > 0.0) {
                return Err(Error::invalid("CT noise needs positive N0 and attenuation"));
            }
            let mut out = Array2::zeros(clean.dim());
            for (slot, t) in out.iter_mut().zip(clean.iter()) {
                let mean = n0 * (-mu_ct * t).exp();
                let counts = if mean > 0.0 && mean.is_finite() {
                    Poisson::new(mean)
                        .map_err(|e| Error::Numerical(format!("poisson mean {mean}: {e}")))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                *slot = -(counts.max(1.0) / n0).ln() / mu_ct;
            }
            Ok(out)
        }
    }
}
