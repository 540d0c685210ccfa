//! Accelerated gradient descent for `g_y(x) = D(Hx, y) + lambda R_y(x)`, the
//! proximal denoiser and the two-stage adaptive pipeline.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::forward_models::{Fidelity, ForwardOperator, LinearOperator};
use crate::regularizer::{AdaptiveRegularizer, MaskProvider, SpatialMask};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 2000;
/// Slack allowed in the sufficient-decrease test, relative to the objective.
const DESCENT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ReconstructionProblem {
    y: Array2<f64>,
    op: ForwardOperator,
    fidelity: Fidelity,
    regularizer: AdaptiveRegularizer,
    lambda: f64,
    init: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub x_hat: Array2<f64>,
    pub iterations: usize,
    /// `||grad g(x_hat)|| / sqrt(n)`, same scale as [`optimality_residual`].
    pub final_gradient_norm: f64,
    pub initial_gradient_norm: f64,
    pub objective_trace: Vec<f64>,
    /// Iterations after which the momentum was reset.
    pub restarts: Vec<usize>,
    /// Step-size constant in use when the solver stopped.
    pub lipschitz: f64,
    pub converged: bool,
}

fn l2(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl ReconstructionProblem {
    pub fn new(
        y: Array2<f64>,
        op: ForwardOperator,
        fidelity: Fidelity,
        regularizer: AdaptiveRegularizer,
        lambda: f64,
        init: Array2<f64>,
    ) -> Result<Self> {
        fidelity.validate()?;
        if y.dim() != op.shape_out() {
            return Err(Error::shape(op.shape_out(), y.dim()));
        }
        if init.dim() != op.shape_in() {
            return Err(Error::shape(op.shape_in(), init.dim()));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data".into()));
        }
        if let Some(mask) = regularizer.mask() {
            if mask.dims() != op.shape_in() {
                return Err(Error::shape(op.shape_in(), mask.dims()));
            }
        }
        Ok(ReconstructionProblem {
            y,
            op,
            fidelity,
            regularizer,
            lambda,
            init,
        })
    }

    /// Denoising problem `1/2 ||x - y||^2 + lambda R(x)` started at `y`.
    pub fn denoising(y: Array2<f64>, regularizer: AdaptiveRegularizer, lambda: f64) -> Result<Self> {
        let op = ForwardOperator::identity(y.dim());
        let init = y.clone();
        Self::new(y, op, Fidelity::ScaledQuadratic { sigma: 1.0 }, regularizer, lambda, init)
    }

    pub fn with_init(mut self, init: Array2<f64>) -> Result<Self> {
        if init.dim() != self.op.shape_in() {
            return Err(Error::shape(self.op.shape_in(), init.dim()));
        }
        self.init = init;
        Ok(self)
    }

    pub fn with_data(mut self, y: Array2<f64>) -> Result<Self> {
        if y.dim() != self.op.shape_out() {
            return Err(Error::shape(self.op.shape_out(), y.dim()));
        }
        self.y = y;
        Ok(self)
    }

    pub fn with_regularizer(mut self, regularizer: AdaptiveRegularizer) -> Self {
        self.regularizer = regularizer;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn operator(&self) -> &ForwardOperator {
        &self.op
    }

    pub fn fidelity(&self) -> Fidelity {
        self.fidelity
    }

    pub fn regularizer(&self) -> &AdaptiveRegularizer {
        &self.regularizer
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn init(&self) -> &Array2<f64> {
        &self.init
    }

    fn check_x(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != self.op.shape_in() {
            return Err(Error::shape(self.op.shape_in(), x.dim()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &Array2<f64>) -> Result<f64> {
        self.check_x(x)?;
        let hx = self.op.apply_unchecked(x);
        let reg = if self.lambda == 0.0 { 0.0 } else { self.regularizer.evaluate(x)? };
        Ok(self.fidelity.value_unchecked(&hx, &self.y) + self.lambda * reg)
    }

    pub fn gradient(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.objective_and_gradient(x)?.1)
    }

    pub fn objective_and_gradient(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        self.check_x(x)?;
        let hx = self.op.apply_unchecked(x);
        let mut grad = self.op.adjoint_unchecked(&self.fidelity.gradient_unchecked(&hx, &self.y));
        let mut value = self.fidelity.value_unchecked(&hx, &self.y);
        if self.lambda != 0.0 {
            let (r, g) = self.regularizer.value_and_gradient(x)?;
            value += self.lambda * r;
            Zip::from(&mut grad).and(&g).for_each(|a, b| *a += self.lambda * b);
        }
        Ok((value, grad))
    }

    /// `L = Lip(D) ||H||^2 + lambda Lip(grad R)`; for the CT fidelity the
    /// data term is bounded on `{Hx >= 0}`.
    pub fn lipschitz(&self) -> f64 {
        let h = self.op.norm_estimate();
        self.fidelity.lipschitz(0.0) * h * h + self.lambda * self.regularizer.lipschitz_gradient_bound()
    }
}

/// `||grad g_y(x)|| / sqrt(n)`.
pub fn optimality_residual(problem: &ReconstructionProblem, x: &Array2<f64>) -> Result<f64> {
    let g = problem.gradient(x)?;
    Ok(l2(&g) / (g.len() as f64).sqrt())
}

/// Nesterov-accelerated gradient descent with step `1/L` and gradient restart.
///
/// Stops once `||grad g(x_k)|| <= tol * max(1, ||grad g(x_0)||)`. If a step
/// violates the descent lemma (only possible when `L` is a local constant,
/// as for the CT fidelity) `L` is doubled and the step repeated.
pub fn agd_minimize(problem: &ReconstructionProblem, tol: f64, max_iters: usize) -> Result<SolverResult> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    let mut lip = problem.lipschitz();
    if !(lip.is_finite() && lip > 0.0) {
        return Err(Error::Numerical(format!("gradient Lipschitz constant {lip} is not positive and finite")));
    }
    let n_sqrt = (problem.init.len() as f64).sqrt();
    let mut x = problem.init.clone();
    let (f0, g0) = problem.objective_and_gradient(&x)?;
    if !f0.is_finite() {
        return Err(Error::Numerical("objective is not finite at the initial point".into()));
    }
    let g0_norm = l2(&g0);
    let threshold = tol * g0_norm.max(1.0);
    let mut trace = vec![f0];
    let mut restarts = Vec::new();
    let mut g_norm = g0_norm;
    if g_norm <= threshold {
        return Ok(SolverResult {
            x_hat: x,
            iterations: 0,
            final_gradient_norm: g_norm / n_sqrt,
            initial_gradient_norm: g0_norm / n_sqrt,
            objective_trace: trace,
            restarts,
            lipschitz: lip,
            converged: true,
        });
    }

    let mut t = 1.0f64;
    let mut y = x.clone();
    let (mut fy, mut gy) = (f0, g0);
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=max_iters {
        iterations = k;
        let gy_sq = gy.iter().map(|v| v * v).sum::<f64>();
        let (x_new, f_new, g_new) = loop {
            let cand = Zip::from(&y).and(&gy).map_collect(|a, b| a - b / lip);
            let (f, g) = problem.objective_and_gradient(&cand)?;
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite objective at iteration {k}")));
            }
            if f <= fy - 0.5 * gy_sq / lip + DESCENT_SLACK * fy.abs().max(1.0) {
                break (cand, f, g);
            }
            lip *= 2.0;
        };
        trace.push(f_new);
        g_norm = l2(&g_new);
        if g_norm <= threshold {
            x = x_new;
            converged = true;
            break;
        }
        let progress = Zip::from(&g_new).and(&x_new).and(&x).fold(0.0, |acc, g, a, b| acc + g * (a - b));
        if progress > 0.0 {
            restarts.push(k);
            t = 1.0;
            y = x_new.clone();
            fy = f_new;
            gy = g_new;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = Zip::from(&x_new).and(&x).map_collect(|a, b| a + beta * (a - b));
            t = t_next;
            let (f, g) = problem.objective_and_gradient(&y)?;
            fy = f;
            gy = g;
        }
        x = x_new;
    }
    Ok(SolverResult {
        x_hat: x,
        iterations,
        final_gradient_norm: g_norm / n_sqrt,
        initial_gradient_norm: g0_norm / n_sqrt,
        objective_trace: trace,
        restarts,
        lipschitz: lip,
        converged,
    })
}

/// `argmin_x 1/2 ||x - y||^2 + lambda R_sigma(x)` started at `y`; the mask of
/// `regularizer` (if any) is kept.
pub fn prox_denoise(
    regularizer: &AdaptiveRegularizer,
    y: &Array2<f64>,
    sigma: f64,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SolverResult> {
    let reg = regularizer.with_sigma(sigma)?;
    let problem = ReconstructionProblem::denoising(y.clone(), reg, lambda)?;
    agd_minimize(&problem, tol, max_iters)
}

#[derive(Debug, Clone)]
pub struct AdaptiveReconstruction {
    pub x_est: Array2<f64>,
    pub x_hat: Array2<f64>,
    pub mask: SpatialMask,
    pub stage1: SolverResult,
    pub stage2: SolverResult,
}

/// Options shared by both stages of [`reconstruct_adaptive`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveOptions {
    pub lambda: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iters: usize,
}

/// Stage 1 solves with unit weights from `y` (denoising) or `H^T y`; stage 2
/// derives the mask from the stage-1 result and re-solves from it.
pub fn reconstruct_adaptive(
    y: &Array2<f64>,
    op: &ForwardOperator,
    fidelity: Fidelity,
    regularizer: &AdaptiveRegularizer,
    provider: &MaskProvider,
    options: AdaptiveOptions,
) -> Result<AdaptiveReconstruction> {
    let reg = regularizer.with_sigma(options.sigma)?.without_mask();
    let init = if op.is_identity() { y.clone() } else { op.adjoint(y)? };
    let stage1_problem = ReconstructionProblem::new(y.clone(), op.clone(), fidelity, reg.clone(), options.lambda, init)?;
    let stage1 = agd_minimize(&stage1_problem, options.tol, options.max_iters)?;
    let x_est = stage1.x_hat.clone();
    let mask = provider.make_mask(&x_est, reg.bank(), options.epsilon)?;
    let stage2_problem = stage1_problem
        .with_regularizer(reg.with_mask(mask.clone())?)
        .with_init(x_est.clone())?;
    let stage2 = agd_minimize(&stage2_problem, options.tol, options.max_iters)?;
    Ok(AdaptiveReconstruction {
        x_hat: stage2.x_hat.clone(),
        x_est,
        mask,
        stage1,
        stage2,
    })
}

/// Refinement factors of the coarse-to-fine hyperparameter search.
pub const SEARCH_FACTORS: [f64; 3] = [4.0, 2.0, 1.25];

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: Vec<f64>,
    pub score: f64,
    pub evaluations: usize,
}

/// Maximizes `score` over positive parameters by multiplicative grids:
/// at each level every parameter tries `center * f^{-1, 0, 1}` jointly and the
/// best point becomes the next center.
pub fn coarse_to_fine_search<F>(start: &[f64], mut score: F) -> Result<SearchResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if start.is_empty() || start.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("search start must be nonempty and positive"));
    }
    let mut center = start.to_vec();
    let mut best_score = score(&center)?;
    let mut evaluations = 1;
    let d = center.len();
    for factor in SEARCH_FACTORS {
        let base = center.clone();
        for code in 0..3usize.pow(d as u32) {
            let mut c = code;
            let point: Vec<f64> = base
                .iter()
                .map(|v| {
                    let e = (c % 3) as i32 - 1;
                    c /= 3;
                    v * factor.powi(e)
                })
                .collect();
            if point == base {
                continue;
            }
            let s = score(&point)?;
            evaluations += 1;
            if s > best_score {
                best_score = s;
                center = point;
            }
        }
    }
    Ok(SearchResult {
        best: center,
        score: best_score,
        evaluations,
    })
}
