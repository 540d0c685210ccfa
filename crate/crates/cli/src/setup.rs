//! Builds library objects from configuration sections.

use adaptive_ridge::filter_bank::FilterBank;
use adaptive_ridge::forward_models::{
    BlurStride, Fidelity, FourierSubsample, ForwardOperator, NoiseSpec, Radon, CT_ATTENUATION, CT_PHOTON_COUNT,
};
use adaptive_ridge::io::{load_model, read_grid, Config};
use adaptive_ridge::potentials::{Convexity, NoiseScaling, SplinePotential};
use adaptive_ridge::regularizer::{AdaptiveRegularizer, LocalResponse, MaskProvider, DEFAULT_EPSILON};
use adaptive_ridge::solver::{AdaptiveOptions, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use adaptive_ridge::training::{FinetuneConfig, GroupRates, TrainConfig};
use adaptive_ridge::{Error, Result};

pub const DEFAULT_CHANNELS: usize = 8;
pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const DEFAULT_MU: f64 = 15.0;
pub const DEFAULT_SCALING: f64 = 1.0;

/// Input image shape from `[problem] height`/`width`.
pub fn image_shape(cfg: &Config) -> Result<(usize, usize)> {
    Ok((cfg.require("problem", "height")?, cfg.require("problem", "width")?))
}

pub fn operator(cfg: &Config, shape: (usize, usize)) -> Result<ForwardOperator> {
    let kind: String = cfg.get_or("problem", "operator", "identity".to_string())?;
    let wrap = |e: Error, key: &str| match e {
        Error::InvalidInput(msg) => Error::config("problem", key, msg),
        other => other,
    };
    match kind.as_str() {
        "identity" => Ok(ForwardOperator::identity(shape)),
        "blur_stride" => BlurStride::new(
            shape,
            cfg.get_or("problem", "blur_kernel_size", 5)?,
            cfg.get_or("problem", "blur_std", 1.0)?,
            cfg.get_or("problem", "stride", 1)?,
        )
        .map(ForwardOperator::BlurStride)
        .map_err(|e| wrap(e, "blur_std")),
        "fourier_subsample" => FourierSubsample::with_acceleration(
            shape,
            cfg.require("problem", "acceleration")?,
            cfg.get_or("problem", "center_fraction", 0.08)?,
            cfg.get_or("problem", "mask_seed", 0)?,
        )
        .map(ForwardOperator::FourierSubsample)
        .map_err(|e| wrap(e, "acceleration")),
        "radon" => Radon::new(
            shape,
            cfg.require("problem", "angles")?,
            cfg.get("problem", "detectors")?,
            cfg.get_or("problem", "pixel_size", 1.0)?,
            cfg.get_or("problem", "missing_fraction", 0.0)?,
        )
        .map(ForwardOperator::Radon)
        .map_err(|e| wrap(e, "angles")),
        other => Err(Error::config("problem", "operator", format!("unknown operator kind {other:?}"))),
    }
}

pub fn fidelity(cfg: &Config) -> Result<Fidelity> {
    let kind: String = cfg.get_or("problem", "fidelity", "quadratic".to_string())?;
    match kind.as_str() {
        "quadratic" => Fidelity::quadratic(cfg.get_or("problem", "fidelity_sigma", 1.0)?),
        "ct_poisson" => {
            Fidelity::ct_poisson(cfg.get_or("problem", "n0", CT_PHOTON_COUNT)?, cfg.get_or("problem", "mu_ct", CT_ATTENUATION)?)
        }
        other => Err(Error::config("problem", "fidelity", format!("unknown fidelity {other:?}"))),
    }
}

pub fn noise(cfg: &Config) -> Result<NoiseSpec> {
    let kind: String = cfg.require("problem", "noise")?;
    match kind.as_str() {
        "gaussian" => Ok(NoiseSpec::Gaussian { sigma: cfg.require("problem", "noise_sigma")? }),
        "ct_poisson" => Ok(NoiseSpec::CtPoisson {
            n0: cfg.get_or("problem", "n0", CT_PHOTON_COUNT)?,
            mu_ct: cfg.get_or("problem", "mu_ct", CT_ATTENUATION)?,
        }),
        other => Err(Error::config("problem", "noise", format!("unknown noise model {other:?}"))),
    }
}

/// The model from `[regularizer] checkpoint`, or a fresh DCT model.
pub fn regularizer(cfg: &Config) -> Result<(AdaptiveRegularizer, Option<LocalResponse>)> {
    if let Some(path) = cfg.get_str("regularizer", "checkpoint") {
        return load_model(path);
    }
    fresh_regularizer(cfg).map(|r| (r, None))
}

pub fn fresh_regularizer(cfg: &Config) -> Result<AdaptiveRegularizer> {
    let channels = cfg.get_or("regularizer", "channels", DEFAULT_CHANNELS)?;
    let kernel_size = cfg.get_or("regularizer", "kernel_size", DEFAULT_KERNEL_SIZE)?;
    let knots = cfg.get_or("regularizer", "knot_count", adaptive_ridge::potentials::DEFAULT_KNOT_COUNT)?;
    let spacing = cfg.get_or("regularizer", "spacing", adaptive_ridge::potentials::DEFAULT_SPACING)?;
    let convexity = Convexity::from_c_cvx(cfg.get_or("regularizer", "c_cvx", 0.0)?).map_err(|e| Error::config("regularizer", "c_cvx", e.to_string()))?;
    let mu = cfg.get_or("regularizer", "mu", DEFAULT_MU)?;
    let scaling = cfg.get_or("regularizer", "scaling", DEFAULT_SCALING)?;
    let sigma = cfg.get_or("solver", "sigma", 25.0 / 255.0)?;
    let bank = FilterBank::dct(channels, kernel_size)?;
    let potential = SplinePotential::with_default_minus(knots, spacing, vec![1.0; knots.saturating_sub(1)], mu, convexity)?;
    AdaptiveRegularizer::new(bank, potential, vec![NoiseScaling::constant(scaling); channels], sigma)
}

pub fn epsilon(cfg: &Config) -> Result<f64> {
    cfg.get_or("mask", "epsilon", DEFAULT_EPSILON)
}

/// `[mask] provider`: `constant` (default), `file` or `local_response`; a
/// checkpointed local-response provider is used when the config names none.
pub fn provider(cfg: &Config, n_channels: usize, stored: Option<&LocalResponse>) -> Result<MaskProvider> {
    let kind: Option<String> = cfg.get("mask", "provider")?;
    match kind.as_deref() {
        None => Ok(stored.cloned().map_or(MaskProvider::Constant, MaskProvider::LocalResponse)),
        Some("constant") => Ok(MaskProvider::Constant),
        Some("file") => {
            let path: String = cfg.require("mask", "file")?;
            Ok(MaskProvider::File(read_grid(&path)?.to_array3()))
        }
        Some("local_response") => Ok(MaskProvider::LocalResponse(local_response(cfg, n_channels, stored)?)),
        Some(other) => Err(Error::config("mask", "provider", format!("unknown provider {other:?}"))),
    }
}

/// Local-response parameters from `[mask]`, falling back to a stored provider.
pub fn local_response(cfg: &Config, n_channels: usize, stored: Option<&LocalResponse>) -> Result<LocalResponse> {
    let base = stored.cloned().unwrap_or_else(|| LocalResponse::new(10.0, 0.05, n_channels, 3));
    let mut p = LocalResponse::new(
        cfg.get_or("mask", "gain", base.gain)?,
        cfg.get_or("mask", "threshold", base.threshold)?,
        n_channels,
        cfg.get_or("mask", "smoothing_width", base.smoothing_width)?,
    );
    if base.offsets.len() == n_channels {
        p.offsets = base.offsets;
    }
    Ok(p)
}

/// Solver options; `sigma` overrides `[solver] sigma` when given.
pub fn adaptive_options(cfg: &Config, sigma: Option<f64>) -> Result<AdaptiveOptions> {
    Ok(AdaptiveOptions {
        lambda: cfg.require("solver", "lambda")?,
        sigma: match sigma {
            Some(s) => s,
            None => cfg.require("solver", "sigma")?,
        },
        epsilon: epsilon(cfg)?,
        tol: cfg.get_or("solver", "tol", DEFAULT_TOL)?,
        max_iters: cfg.get_or("solver", "max_iters", DEFAULT_MAX_ITERS)?,
    })
}

pub fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let rates = GroupRates {
        psi: cfg.get_or("train", "rate_psi", d.rates.psi)?,
        mu: cfg.get_or("train", "rate_mu", d.rates.mu)?,
        scaling: cfg.get_or("train", "rate_scaling", d.rates.scaling)?,
        mask: cfg.get_or("train", "rate_mask", d.rates.mask)?,
    };
    let c = TrainConfig {
        patch_size: cfg.get_or("train", "patch_size", d.patch_size)?,
        n_patches: cfg.get_or("train", "n_patches", d.n_patches)?,
        validation_patches: cfg.get_or("train", "validation_patches", d.validation_patches)?,
        sigma_range: (cfg.get_or("train", "sigma_min", d.sigma_range.0)?, cfg.get_or("train", "sigma_max", d.sigma_range.1)?),
        batch_size: cfg.get_or("train", "batch_size", d.batch_size)?,
        rates,
        epochs: cfg.get_or("train", "epochs", d.epochs)?,
        seed: cfg.get_or("train", "seed", d.seed)?,
        lambda: cfg.get_or("solver", "lambda", d.lambda)?,
        tol: cfg.get_or("solver", "tol", d.tol)?,
        max_iters: cfg.get_or("solver", "max_iters", d.max_iters)?,
        scheduler_epochs: cfg.get_or("train", "scheduler_epochs", d.scheduler_epochs)?,
    };
    c.validate().map_err(|e| Error::config("train", "", e.to_string()))?;
    Ok(c)
}

pub fn finetune_config(cfg: &Config) -> Result<FinetuneConfig> {
    let d = FinetuneConfig::default();
    Ok(FinetuneConfig {
        epochs: cfg.get_or("train", "finetune_epochs", d.epochs)?,
        rate: cfg.get_or("train", "finetune_rate", d.rate)?,
    })
}
