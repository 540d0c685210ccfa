//! Supervised denoiser training by implicit differentiation of the prox fixed point.

use log::{info, warn};
use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward_models::{Fidelity, ForwardOperator, LinearOperator};
use crate::potentials::{project_coefficients, NoiseScaling, SIGMA_MAX};
use crate::regularizer::{AdaptiveRegularizer, LocalResponse, MaskPartials};
use crate::solver::{agd_minimize, AdaptiveOptions, ReconstructionProblem, DEFAULT_MAX_ITERS, DEFAULT_TOL};

pub const CG_MAX_ITERS: usize = 500;
pub const CG_TOL: f64 = 1e-10;

/// Derivatives of a scalar loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub psi_plus: Vec<f64>,
    pub psi_minus: Vec<f64>,
    /// With respect to `log mu`.
    pub log_mu: f64,
    /// Per channel, with respect to the knot values of `s_c`.
    pub scalings: Vec<Vec<f64>>,
    pub gain: f64,
    pub threshold: f64,
    pub offsets: Vec<f64>,
}

impl ParameterGradients {
    pub fn zeros(reg: &AdaptiveRegularizer) -> Self {
        let intervals = reg.potential().interval_count();
        ParameterGradients {
            psi_plus: vec![0.0; intervals],
            psi_minus: vec![0.0; intervals],
            log_mu: 0.0,
            scalings: reg.scalings().iter().map(|s| vec![0.0; s.values().len()]).collect(),
            gain: 0.0,
            threshold: 0.0,
            offsets: vec![0.0; reg.n_channels()],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.psi_plus
            .iter()
            .chain(&self.psi_minus)
            .chain(std::iter::once(&self.log_mu))
            .chain(self.scalings.iter().flatten())
            .chain([&self.gain, &self.threshold])
            .chain(&self.offsets)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.psi_plus
            .iter_mut()
            .chain(self.psi_minus.iter_mut())
            .chain(std::iter::once(&mut self.log_mu))
            .chain(self.scalings.iter_mut().flatten())
            .chain([&mut self.gain, &mut self.threshold])
            .chain(self.offsets.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &ParameterGradients) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, t: f64) {
        self.values_mut().for_each(|v| *v *= t);
    }
}

#[derive(Debug, Clone)]
pub struct ImplicitGradient {
    pub gradients: ParameterGradients,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    /// A non-positive curvature direction was met: the objective Hessian is
    /// not positive definite at `x_hat`.
    pub indefinite: bool,
}

struct CgOutcome {
    z: Array2<f64>,
    iterations: usize,
    converged: bool,
    indefinite: bool,
}

fn conjugate_gradient(apply: impl Fn(&Array2<f64>) -> Array2<f64>, b: &Array2<f64>, tol: f64, max_iters: usize) -> CgOutcome {
    let dot = |a: &Array2<f64>, c: &Array2<f64>| Zip::from(a).and(c).fold(0.0, |s, p, q| s + p * q);
    let mut z = Array2::zeros(b.dim());
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return CgOutcome { z, iterations: 0, converged: true, indefinite: false };
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for k in 1..=max_iters {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return CgOutcome { z, iterations: k, converged: false, indefinite: true };
        }
        let step = rs / pap;
        z.scaled_add(step, &p);
        r.scaled_add(-step, &ap);
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= tol * b_norm {
            return CgOutcome { z, iterations: k, converged: true, indefinite: false };
        }
        let beta = rs_new / rs;
        p = &r + &(&p * beta);
        rs = rs_new;
    }
    CgOutcome { z, iterations: max_iters, converged: false, indefinite: false }
}

/// Gradient of `L(x_hat(theta))` from `loss_grad = dL/dx` at a critical point.
///
/// Solves `(H^T D'' H + lambda nabla^2 R) z = loss_grad` by conjugate gradients and
/// returns `-lambda <z, d grad R / d theta>`. Mask-provider derivatives are
/// included when `mask` carries the partials of the mask in use.
pub fn implicit_gradient(
    problem: &ReconstructionProblem,
    x_hat: &Array2<f64>,
    loss_grad: &Array2<f64>,
    mask: Option<&MaskPartials>,
) -> Result<ImplicitGradient> {
    let reg = problem.regularizer();
    let op = problem.operator();
    let lambda = problem.lambda();
    if x_hat.dim() != op.shape_in() {
        return Err(Error::shape(op.shape_in(), x_hat.dim()));
    }
    if loss_grad.dim() != x_hat.dim() {
        return Err(Error::shape(x_hat.dim(), loss_grad.dim()));
    }
    if let Some(m) = mask {
        if m.mask.dims() != x_hat.dim() || m.mask.n_channels() != reg.n_channels() {
            return Err(Error::shape((reg.n_channels(), x_hat.dim()), m.d_gain.dim()));
        }
    }
    let mut grads = ParameterGradients::zeros(reg);
    if lambda == 0.0 || reg.is_zero() && mask.is_none() {
        return Ok(ImplicitGradient { gradients: grads, cg_iterations: 0, cg_converged: true, indefinite: false });
    }

    let hx = op.apply(x_hat)?;
    let data_curv = problem.fidelity().curvature(&hx, problem.y())?;
    let reg_curv = reg.curvature(x_hat)?;
    let apply = |v: &Array2<f64>| {
        let hv = op.apply_unchecked(v) * &data_curv;
        let mut out = op.adjoint_unchecked(&hv);
        out.scaled_add(lambda, &reg.hessian_vec_with(&reg_curv, v));
        out
    };
    let cg = conjugate_gradient(apply, loss_grad, CG_TOL, CG_MAX_ITERS);
    if cg.indefinite {
        warn!("objective Hessian is not positive definite at the solution");
        return Ok(ImplicitGradient { gradients: grads, cg_iterations: cg.iterations, cg_converged: false, indefinite: true });
    }
    if !cg.converged {
        warn!("conjugate gradients did not converge in {CG_MAX_ITERS} iterations");
    }

    let potential = reg.potential();
    let dims = x_hat.dim();
    let x = x_hat.as_standard_layout();
    let z = cg.z.as_standard_layout();
    let plane = dims.0 * dims.1;
    let mut grad_a = vec![0.0; potential.interval_count()];
    for c in 0..reg.n_channels() {
        let alpha = reg.alphas()[c];
        let mut u = vec![0.0; plane];
        reg.bank().apply_channel_add(c, x.as_slice().unwrap(), dims, &mut u);
        let mut q = vec![0.0; plane];
        reg.bank().apply_channel_add(c, z.as_slice().unwrap(), dims, &mut q);
        let weights = reg.mask().map(|m| m.channel(c));
        let mut g_alpha = 0.0;
        for p in 0..plane {
            let m = weights.map_or(1.0, |w| w[p]);
            let v = alpha * u[p];
            let pv = potential.eval_unchecked(v);
            potential.accumulate_slope_basis(v, q[p] * m / alpha, &mut grad_a);
            g_alpha += q[p] * m * (-pv.first_deriv / (alpha * alpha) + pv.second_deriv * u[p] / alpha);
            if let Some(mp) = mask {
                let idx = (c, p / dims.1, p % dims.1);
                let gm = q[p] * pv.first_deriv / alpha;
                grads.gain += gm * mp.d_gain[idx];
                grads.threshold += gm * mp.d_threshold[idx];
                grads.offsets[c] += gm * mp.d_threshold[idx];
            }
        }
        let (j, w0, w1) = reg.scalings()[c].weights(reg.sigma());
        grads.scalings[c][j] += g_alpha * alpha * w0;
        grads.scalings[c][j + 1] += g_alpha * alpha * w1;
    }
    let mu = potential.mu();
    let c_cvx = potential.convexity().c_cvx();
    for (i, ga) in grad_a.iter().enumerate() {
        grads.psi_plus[i] = mu * ga;
        grads.psi_minus[i] = -c_cvx * ga;
        grads.log_mu += mu * potential.psi_plus()[i] * ga;
    }
    grads.scale(-lambda);
    Ok(ImplicitGradient {
        gradients: grads,
        cg_iterations: cg.iterations,
        cg_converged: cg.converged,
        indefinite: false,
    })
}

/// First-order optimizer with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            *p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
        }
    }
}

/// Learning rates per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub psi: f64,
    pub mu: f64,
    pub scaling: f64,
    pub mask: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        GroupRates { psi: 5e-3, mu: 5e-2, scaling: 5e-3, mask: 5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub n_patches: usize,
    /// Taken from the end of the patch list and never trained on.
    pub validation_patches: usize,
    pub sigma_range: (f64, f64),
    pub batch_size: usize,
    pub rates: GroupRates,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Rates fall linearly to half their value over this many epochs (0 = off).
    pub scheduler_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 40,
            n_patches: 2000,
            validation_patches: 32,
            sigma_range: (0.0, SIGMA_MAX),
            batch_size: 32,
            rates: GroupRates::default(),
            epochs: 1,
            seed: 0,
            lambda: 1.0,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            scheduler_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sigma_range;
        if !(0.0 <= lo && lo <= hi && hi <= SIGMA_MAX + 1e-15) {
            return Err(Error::invalid(format!("sigma range [{lo}, {hi}] must lie within [0, 30/255]")));
        }
        let r = self.rates;
        if [r.psi, r.mu, r.scaling, r.mask].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("learning rates must be finite and nonnegative"));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::invalid("batch and patch sizes must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::invalid("solver tolerance and iteration cap must be positive"));
        }
        Ok(())
    }

    /// Learning-rate multiplier during `epoch` (zero-based).
    pub fn rate_factor(&self, epoch: usize) -> f64 {
        if self.scheduler_epochs == 0 {
            1.0
        } else {
            1.0 - 0.5 * epoch.min(self.scheduler_epochs) as f64 / self.scheduler_epochs as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean L1 loss over the training patches (NaN for the initial record).
    pub train_l1: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MSE.
    pub regularizer: AdaptiveRegularizer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub diverged: bool,
    pub skipped_samples: usize,
}

/// Noisy sample `x + sigma n` with its own stream so draws do not depend on
/// batching or thread scheduling.
fn noisy_sample(x: &Array2<f64>, seed: u64, stream: u64, range: (f64, f64)) -> (Array2<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let sigma = if range.1 > range.0 { rng.gen_range(range.0..=range.1) } else { range.0 };
    let y = x.mapv(|v| {
        let n: f64 = rng.sample(StandardNormal);
        v + sigma * n
    });
    (y, sigma)
}

fn l1_and_grad(x_hat: &Array2<f64>, truth: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = truth.len() as f64;
    let loss = Zip::from(x_hat).and(truth).fold(0.0, |s, a, b| s + (a - b).abs()) / n;
    let grad = Zip::from(x_hat).and(truth).map_collect(|a, b| {
        let d = a - b;
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    (loss, grad)
}

struct TrainableState {
    psi_plus: Vec<f64>,
    psi_minus: Vec<f64>,
    log_mu: Vec<f64>,
    scalings: Vec<Vec<f64>>,
}

impl TrainableState {
    fn of(reg: &AdaptiveRegularizer) -> Self {
        let p = reg.potential();
        TrainableState {
            psi_plus: p.psi_plus().to_vec(),
            psi_minus: p.psi_minus().to_vec(),
            log_mu: vec![p.mu().ln()],
            scalings: reg.scalings().iter().map(|s| s.values().to_vec()).collect(),
        }
    }

    fn build(&self, template: &AdaptiveRegularizer) -> Result<AdaptiveRegularizer> {
        let potential = template.potential().with_parameters(
            project_coefficients(&self.psi_plus),
            project_coefficients(&self.psi_minus),
            self.log_mu[0].exp(),
        )?;
        let scalings = self
            .scalings
            .iter()
            .zip(template.scalings())
            .map(|(v, s)| NoiseScaling::new(v.clone(), s.sigma_max()))
            .collect::<Result<Vec<_>>>()?;
        template.with_potential(potential).with_scalings(scalings)
    }
}

struct Optimizers {
    psi_plus: Adam,
    psi_minus: Adam,
    log_mu: Adam,
    scalings: Vec<Adam>,
}

fn denoise_sample(
    reg: &AdaptiveRegularizer,
    truth: &Array2<f64>,
    y: &Array2<f64>,
    sigma: f64,
    config: &TrainConfig,
) -> Result<Array2<f64>> {
    let problem = ReconstructionProblem::denoising(y.clone(), reg.with_sigma(sigma)?, config.lambda)?;
    let _ = truth;
    Ok(agd_minimize(&problem, config.tol, config.max_iters)?.x_hat)
}

fn validation_mse(reg: &AdaptiveRegularizer, samples: &[(Array2<f64>, Array2<f64>, f64)], config: &TrainConfig) -> Result<f64> {
    let errs = samples
        .par_iter()
        .map(|(truth, y, sigma)| {
            let x = denoise_sample(reg, truth, y, *sigma, config)?;
            Ok(Zip::from(&x).and(truth).fold(0.0, |s, a, b| s + (a - b) * (a - b)) / truth.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Minimizes the mean L1 loss of the prox denoiser over noisy patches.
///
/// Each patch gets a fixed noise level and noise draw; validation MSE selects
/// the returned parameters.
pub fn train_denoiser(reg: &AdaptiveRegularizer, patches: &[Array2<f64>], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if patches.len() <= config.validation_patches {
        return Err(Error::invalid(format!(
            "{} patches leave nothing to train on after {} validation patches",
            patches.len(),
            config.validation_patches
        )));
    }
    let n_train = patches.len() - config.validation_patches;
    let train: Vec<(Array2<f64>, Array2<f64>, f64)> = patches[..n_train]
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let (y, s) = noisy_sample(x, config.seed, k as u64, config.sigma_range);
            (x.clone(), y, s)
        })
        .collect();
    let val: Vec<(Array2<f64>, Array2<f64>, f64)> = patches[n_train..]
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let (y, s) = noisy_sample(x, config.seed, (1 << 40) + k as u64, config.sigma_range);
            (x.clone(), y, s)
        })
        .collect();

    let mut current = reg.without_mask();
    let mut state = TrainableState::of(&current);
    let mut opt = Optimizers {
        psi_plus: Adam::new(state.psi_plus.len()),
        psi_minus: Adam::new(state.psi_minus.len()),
        log_mu: Adam::new(1),
        scalings: state.scalings.iter().map(|s| Adam::new(s.len())).collect(),
    };
    let val0 = validation_mse(&current, &val, config)?;
    let mut history = vec![EpochRecord { epoch: 0, train_l1: f64::NAN, val_mse: val0 }];
    let mut best = (current.clone(), val0, 0usize);
    let mut diverged = false;
    let mut skipped = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5f3c_0b1d);

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffler);
        let lr = config.rate_factor(epoch - 1);
        let mut losses = vec![f64::NAN; n_train];
        for batch in order.chunks(config.batch_size) {
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            let results = batch
                .par_iter()
                .map(|&k| {
                    let (truth, y, sigma) = &train[k];
                    let r = current.with_sigma(*sigma)?;
                    let problem = ReconstructionProblem::denoising(y.clone(), r, config.lambda)?;
                    let sol = agd_minimize(&problem, config.tol, config.max_iters)?;
                    let (loss, lg) = l1_and_grad(&sol.x_hat, truth);
                    let ig = implicit_gradient(&problem, &sol.x_hat, &lg, None)?;
                    Ok((loss, ig))
                })
                .collect::<Result<Vec<_>>>();
            let results = match results {
                Ok(r) => r,
                Err(Error::Numerical(msg)) => {
                    warn!("training diverged: {msg}");
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut total = ParameterGradients::zeros(&current);
            let mut used = 0usize;
            for (&k, (loss, ig)) in batch.iter().zip(&results) {
                losses[k] = *loss;
                if !loss.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
                if ig.indefinite || !ig.gradients.is_finite() {
                    skipped += 1;
                    continue;
                }
                total.add_assign(&ig.gradients);
                used += 1;
            }
            if used == 0 {
                continue;
            }
            total.scale(1.0 / used as f64);
            let r = config.rates;
            opt.psi_plus.step(&mut state.psi_plus, &total.psi_plus, lr * r.psi);
            opt.psi_minus.step(&mut state.psi_minus, &total.psi_minus, lr * r.psi);
            opt.log_mu.step(&mut state.log_mu, &[total.log_mu], lr * r.mu);
            for (c, adam) in opt.scalings.iter_mut().enumerate() {
                adam.step(&mut state.scalings[c], &total.scalings[c], lr * r.scaling);
            }
            state.psi_plus = project_coefficients(&state.psi_plus);
            state.psi_minus = project_coefficients(&state.psi_minus);
            current = state.build(&current)?;
        }
        let train_l1 = losses.iter().sum::<f64>() / n_train as f64;
        let val_mse = validation_mse(&current, &val, config)?;
        if !val_mse.is_finite() || !train_l1.is_finite() {
            diverged = true;
            break;
        }
        info!("epoch {epoch}: train L1 {train_l1:.6e}, validation MSE {val_mse:.6e}");
        history.push(EpochRecord { epoch, train_l1, val_mse });
        if val_mse < best.1 {
            best = (current.clone(), val_mse, epoch);
        }
    }
    Ok(TrainOutcome { regularizer: best.0, history, best_epoch: best.2, diverged, skipped_samples: skipped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 10, rate: 5e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Provider with the lowest stage-2 loss seen, including the initial one.
    pub provider: LocalResponse,
    /// Mean stage-2 L1 loss before each update and after the last one.
    pub loss_trace: Vec<f64>,
    pub best_epoch: usize,
}

/// A task image with its measured data.
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub truth: Array2<f64>,
    pub data: Array2<f64>,
}

/// Tunes gain, threshold and per-channel offsets of a local-response mask
/// against the stage-2 reconstruction loss; the model and the stage-1
/// reconstructions stay fixed, the smoothing width is not trained.
pub fn finetune_mask_provider(
    reg: &AdaptiveRegularizer,
    provider: &LocalResponse,
    samples: &[TaskSample],
    op: &ForwardOperator,
    fidelity: Fidelity,
    options: AdaptiveOptions,
    config: FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("no task samples"));
    }
    if !(config.rate.is_finite() && config.rate >= 0.0) {
        return Err(Error::invalid("finetuning rate must be finite and nonnegative"));
    }
    let base = reg.with_sigma(options.sigma)?.without_mask();
    let stage1 = samples
        .par_iter()
        .map(|s| {
            let init = if op.is_identity() { s.data.clone() } else { op.adjoint(&s.data)? };
            let p = ReconstructionProblem::new(s.data.clone(), op.clone(), fidelity, base.clone(), options.lambda, init)?;
            Ok(agd_minimize(&p, options.tol, options.max_iters)?.x_hat)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut current = provider.clone();
    let mut params = vec![current.gain, current.threshold];
    params.extend(&current.offsets);
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(config.epochs + 1);
    let mut best = (current.clone(), f64::INFINITY, 0usize);
    for epoch in 0..=config.epochs {
        let want_grad = epoch < config.epochs;
        let results = samples
            .par_iter()
            .zip(&stage1)
            .map(|(s, x_est)| {
                let partials = current.partials(x_est, base.bank(), options.epsilon)?;
                let r = base.with_mask(partials.mask.clone())?;
                let p = ReconstructionProblem::new(s.data.clone(), op.clone(), fidelity, r, options.lambda, x_est.clone())?;
                let sol = agd_minimize(&p, options.tol, options.max_iters)?;
                let (loss, lg) = l1_and_grad(&sol.x_hat, &s.truth);
                let grads = if want_grad {
                    let ig = implicit_gradient(&p, &sol.x_hat, &lg, Some(&partials))?;
                    (!ig.indefinite).then_some(ig.gradients)
                } else {
                    None
                };
                Ok((loss, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("stage-2 loss became {loss} in epoch {epoch}")));
        }
        trace.push(loss);
        if loss < best.1 {
            best = (current.clone(), loss, epoch);
        }
        if !want_grad {
            break;
        }
        let mut g = vec![0.0; params.len()];
        let mut used = 0usize;
        for grads in results.iter().filter_map(|r| r.1.as_ref()) {
            g[0] += grads.gain;
            g[1] += grads.threshold;
            for (slot, v) in g[2..].iter_mut().zip(&grads.offsets) {
                *slot += v;
            }
            used += 1;
        }
        if used == 0 {
            continue;
        }
        g.iter_mut().for_each(|v| *v /= used as f64);
        adam.step(&mut params, &g, config.rate);
        params[0] = params[0].max(0.0);
        current.gain = params[0];
        current.threshold = params[1];
        current.offsets.copy_from_slice(&params[2..]);
    }
    Ok(FinetuneOutcome { provider: best.0, loss_trace: trace, best_epoch: best.2 })
}
