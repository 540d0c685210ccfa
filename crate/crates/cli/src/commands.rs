use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adaptive_ridge::forward_models::{simulate_data, ForwardOperator, LinearOperator};
use adaptive_ridge::io::{read_grid, save_model, write_grid, Config, GridImage};
use adaptive_ridge::metrics::{psnr, ssim};
use adaptive_ridge::phantoms::{extract_patches, piecewise_constant};
use adaptive_ridge::solver::{reconstruct_adaptive, AdaptiveReconstruction};
use adaptive_ridge::stability_lab::{
    empirical_mask_lipschitz, empirical_solution_map_lipschitz, geometric_deltas, gibbs_coercivity, hoffman_constant,
    hoffman_distance_check, join_values, prior_normalizability_check, vanishing_noise_rates, PolyhedralSystem,
    RateExperiment, Report,
};
use adaptive_ridge::training::{finetune_mask_provider, train_denoiser, TaskSample};
use adaptive_ridge::{Error, Result};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::setup;

fn load_config(path: &Path) -> Result<Config> {
    Config::load(path)
}

fn read_image(path: &Path) -> Result<Array2<f64>> {
    read_grid(path)?.to_array2()
}

fn write_image(path: &Path, x: &Array2<f64>) -> Result<()> {
    write_grid(path, &GridImage::from_array2(x)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Grid and PGM files of a directory, in name order.
fn read_image_dir(dir: &Path) -> Result<Vec<Array2<f64>>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("grf" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no .grf or .pgm images in {}", dir.display())));
    }
    paths.iter().map(|p| read_image(p)).collect()
}

/// Objective traces of both stages as `stage iteration objective` rows.
fn trace_text(rec: &AdaptiveReconstruction) -> String {
    let mut out = String::from("stage iteration objective\n");
    for (stage, result) in [(1, &rec.stage1), (2, &rec.stage2)] {
        for (k, v) in result.objective_trace.iter().enumerate() {
            writeln!(out, "{stage} {k} {v:.16e}").unwrap();
        }
    }
    out
}

fn log_stages(rec: &AdaptiveReconstruction) {
    for (name, r) in [("stage 1", &rec.stage1), ("stage 2", &rec.stage2)] {
        log::info!("{name}: {} iterations, converged {}, residual {:.3e}", r.iterations, r.converged, r.final_gradient_norm);
    }
}

pub fn denoise(config: &Path, input: &Path, sigma: f64, output: &Path, trace_out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let y = read_image(input)?;
    let (reg, stored) = setup::regularizer(&cfg)?;
    let provider = setup::provider(&cfg, reg.n_channels(), stored.as_ref())?;
    let options = setup::adaptive_options(&cfg, Some(sigma))?;
    let op = ForwardOperator::identity(y.dim());
    let rec = reconstruct_adaptive(&y, &op, setup::fidelity(&cfg)?, &reg, &provider, options)?;
    log_stages(&rec);
    write_image(output, &rec.x_hat)?;
    if let Some(path) = trace_out {
        write_text(path, &trace_text(&rec))?;
    }
    Ok(())
}

pub fn reconstruct(
    config: &Path,
    data: &Path,
    output: &Path,
    mask_out: Option<&Path>,
    trace_out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let shape = setup::image_shape(&cfg)?;
    let op = setup::operator(&cfg, shape)?;
    let y = read_image(data)?;
    if y.dim() != op.shape_out() {
        return Err(Error::ShapeMismatch { expected: format!("{:?}", op.shape_out()), actual: format!("{:?}", y.dim()) });
    }
    let (reg, stored) = setup::regularizer(&cfg)?;
    let provider = setup::provider(&cfg, reg.n_channels(), stored.as_ref())?;
    let rec = reconstruct_adaptive(&y, &op, setup::fidelity(&cfg)?, &reg, &provider, setup::adaptive_options(&cfg, None)?)?;
    log_stages(&rec);
    write_image(output, &rec.x_hat)?;
    if let Some(path) = mask_out {
        write_grid(path, &GridImage::from_array3(rec.mask.weights())?)?;
    }
    if let Some(path) = trace_out {
        write_text(path, &trace_text(&rec))?;
    }
    Ok(())
}

pub fn train(config: &Path, data_dir: &Path, checkpoint_out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let tc = setup::train_config(&cfg)?;
    let images = read_image_dir(data_dir)?;
    let patches = extract_patches(&images, tc.patch_size, tc.n_patches, tc.seed)?;
    let (reg, stored) = setup::regularizer(&cfg)?;
    let outcome = train_denoiser(&reg, &patches, &tc)?;
    println!("epoch train_l1 val_mse");
    for r in &outcome.history {
        println!("{} {:.6e} {:.6e}", r.epoch, r.train_l1, r.val_mse);
    }
    if outcome.diverged {
        log::warn!("training diverged; keeping the best validated parameters");
    }
    if outcome.skipped_samples > 0 {
        log::warn!("{} samples skipped after solver failures", outcome.skipped_samples);
    }
    println!("best_epoch {}", outcome.best_epoch);
    save_model(checkpoint_out, &outcome.regularizer, stored.as_ref())
}

pub fn finetune_mask(config: &Path, checkpoint: &Path, data_dir: &Path, checkpoint_out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let (reg, stored) = adaptive_ridge::io::load_model(checkpoint)?;
    let provider = setup::local_response(&cfg, reg.n_channels(), stored.as_ref())?;
    let truths = read_image_dir(data_dir)?;
    let shape = truths[0].dim();
    if let Some(t) = truths.iter().find(|t| t.dim() != shape) {
        return Err(Error::ShapeMismatch { expected: format!("{shape:?}"), actual: format!("{:?}", t.dim()) });
    }
    let op = setup::operator(&cfg, shape)?;
    let noise = setup::noise(&cfg)?;
    let seed: u64 = cfg.get_or("train", "seed", 0)?;
    let samples = truths
        .into_iter()
        .enumerate()
        .map(|(k, truth)| {
            let data = simulate_data(&op, &truth, noise, seed.wrapping_add(k as u64))?;
            Ok(TaskSample { truth, data })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = finetune_mask_provider(
        &reg,
        &provider,
        &samples,
        &op,
        setup::fidelity(&cfg)?,
        setup::adaptive_options(&cfg, None)?,
        setup::finetune_config(&cfg)?,
    )?;
    println!("epoch loss");
    for (k, v) in outcome.loss_trace.iter().enumerate() {
        println!("{k} {v:.6e}");
    }
    println!("best_epoch {}", outcome.best_epoch);
    let p = &outcome.provider;
    println!("gain {} threshold {} offsets {}", p.gain, p.threshold, join_values(&p.offsets));
    save_model(checkpoint_out.unwrap_or(checkpoint), &reg, Some(&outcome.provider))
}

pub fn metrics(a: &Path, b: &Path, peak: f64) -> Result<String> {
    let x = read_image(a)?;
    let r = read_image(b)?;
    let p = psnr(&x, &r, peak)?;
    let psnr_text = if p.is_infinite() { "inf".to_string() } else { format!("{p:?}") };
    let ssim_text = match ssim(&x, &r, peak) {
        Ok(s) => format!("{s:?}"),
        Err(Error::InvalidInput(_)) => "n/a".to_string(),
        Err(e) => return Err(e),
    };
    Ok(format!("psnr={psnr_text} ssim={ssim_text}"))
}

pub fn simulate(config: &Path, truth: &Path, output: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let x = read_image(truth)?;
    let op = setup::operator(&cfg, x.dim())?;
    let y = simulate_data(&op, &x, setup::noise(&cfg)?, seed)?;
    write_image(output, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Hoffman,
    Lipschitz,
    Rates,
    Coercivity,
}

pub fn analyze(kind: Analysis, config: &Path, report_path: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let report = match kind {
        Analysis::Hoffman => analyze_hoffman(&cfg)?,
        Analysis::Lipschitz => analyze_lipschitz(&cfg)?,
        Analysis::Rates => analyze_rates(&cfg)?,
        Analysis::Coercivity => analyze_coercivity(&cfg)?,
    };
    let text = report.to_string();
    print!("{text}");
    write_text(report_path, &text)
}

fn column(cfg: &Config, key: &str, rows: usize) -> Result<DVector<f64>> {
    let m = cfg.get_matrix("analyze", key)?.unwrap_or_else(|| DMatrix::zeros(rows, 1));
    if m.ncols() == 1 && m.nrows() == rows {
        return Ok(m.column(0).into_owned());
    }
    if m.nrows() == 1 && m.ncols() == rows {
        return Ok(m.row(0).transpose());
    }
    Err(Error::config("analyze", key, format!("expected {rows} values")))
}

fn analyze_hoffman(cfg: &Config) -> Result<Report> {
    let e = cfg.get_matrix("analyze", "hoffman_e")?;
    let f = cfg.get_matrix("analyze", "hoffman_f")?;
    let n = e.iter().chain(f.iter()).map(DMatrix::ncols).max().ok_or_else(|| Error::config("analyze", "hoffman_e", "give hoffman_e or hoffman_f"))?;
    let e = e.unwrap_or_else(|| DMatrix::zeros(0, n));
    let f = f.unwrap_or_else(|| DMatrix::zeros(0, n));
    let b = column(cfg, "hoffman_b", e.nrows())?;
    let q = column(cfg, "hoffman_q", f.nrows())?;
    let system = PolyhedralSystem::new(e.clone(), b, f.clone(), q).map_err(|err| match err {
        Error::InvalidInput(msg) | Error::ShapeMismatch { expected: msg, .. } => Error::config("analyze", "hoffman_e", msg),
        other => other,
    })?;
    let constant = hoffman_constant(&e, &f)?;
    let probes: usize = cfg.get_or("analyze", "probes", 50)?;
    let seed: u64 = cfg.get_or("analyze", "seed", 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let check = hoffman_distance_check(&system, &x)?;
        if !check.holds() {
            violations += 1;
        }
        if check.bound > 0.0 {
            worst = worst.max(check.distance / check.bound);
        }
    }
    let mut r = Report::new();
    r.push("analysis", "hoffman")
        .push("variables", n)
        .push("constant", constant)
        .push("probes", probes)
        .push("violations", violations)
        .push("max_distance_over_bound", worst);
    Ok(r)
}

/// Ground truth for analyses: a seeded piecewise-constant phantom.
fn analysis_truth(cfg: &Config, seed: u64) -> Result<Array2<f64>> {
    let shape = setup::image_shape(cfg)?;
    Ok(piecewise_constant(shape, 6, seed))
}

fn analyze_lipschitz(cfg: &Config) -> Result<Report> {
    let shape = setup::image_shape(cfg)?;
    let op = setup::operator(cfg, shape)?;
    let (reg, _) = setup::regularizer(cfg)?;
    let sigma: f64 = cfg.require("solver", "sigma")?;
    let reg = reg.with_sigma(sigma)?;
    let lambda: f64 = cfg.require("solver", "lambda")?;
    let pairs: usize = cfg.get_or("analyze", "pairs", 20)?;
    let radius: f64 = cfg.get_or("analyze", "radius", 0.1)?;
    let seed: u64 = cfg.get_or("analyze", "seed", 0)?;
    let mode: String = cfg.get_or("analyze", "mode", "solution_map".to_string())?;
    let report = match mode.as_str() {
        "solution_map" => empirical_solution_map_lipschitz(&reg, &op, lambda, pairs, radius, seed)?,
        "mask" => {
            let x = analysis_truth(cfg, seed)?;
            let y = simulate_data(&op, &x, setup::noise(cfg)?, seed)?;
            empirical_mask_lipschitz(&reg, &op, lambda, &y, setup::epsilon(cfg)?, pairs, radius, seed)?
        }
        other => return Err(Error::config("analyze", "mode", format!("unknown mode {other:?}"))),
    };
    let mut r = Report::new();
    r.push("analysis", "lipschitz")
        .push("mode", mode)
        .push("pairs", report.ratios.len())
        .push("max_ratio", report.max_ratio)
        .push("bound", report.bound)
        .push("within_bound", report.max_ratio <= report.bound * (1.0 + 1e-3))
        .push("ratios", join_values(&report.ratios));
    Ok(r)
}

fn analyze_rates(cfg: &Config) -> Result<Report> {
    let shape = setup::image_shape(cfg)?;
    let op = setup::operator(cfg, shape)?;
    let (reg, _) = setup::regularizer(cfg)?;
    let sigma: f64 = cfg.get_or("solver", "sigma", reg.sigma())?;
    let reg = reg.with_sigma(sigma)?;
    let deltas = geometric_deltas(
        cfg.get_or("analyze", "delta_max", 1.0)?,
        cfg.get_or("analyze", "delta_min", 1e-4)?,
        cfg.get_or("analyze", "levels", 9)?,
    )
    .map_err(|e| Error::config("analyze", "levels", e.to_string()))?;
    let seeds: Vec<u64> = cfg.get_list("analyze", "seeds")?.unwrap_or_else(|| (0..5).collect());
    let x_true = analysis_truth(cfg, cfg.get_or("analyze", "seed", 0)?)?;
    let mut exp = RateExperiment::new(deltas, cfg.get_or("analyze", "rate_c", 1.0)?, reg, op, x_true, seeds);
    exp.tol = cfg.get_or("solver", "tol", exp.tol)?;
    exp.max_iters = cfg.get_or("solver", "max_iters", exp.max_iters)?;
    let result = vanishing_noise_rates(&exp)?;
    let mut r = Report::new();
    r.push("analysis", "rates")
        .push("deltas", join_values(&result.deltas))
        .push("lambdas", join_values(&result.lambdas))
        .push("mean_errors", join_values(&result.mean_errors))
        .push("slope", result.slope.map_or("n/a".to_string(), |s| format!("{s:?}")))
        .push("limit_approximate", result.limit_approximate);
    Ok(r)
}

fn analyze_coercivity(cfg: &Config) -> Result<Report> {
    let (reg, _) = setup::regularizer(cfg)?;
    let grid = (cfg.get_or("analyze", "grid_height", 2)?, cfg.get_or("analyze", "grid_width", 2)?);
    let c = gibbs_coercivity(reg.bank(), grid)?;
    let mut r = Report::new();
    r.push("analysis", "coercivity")
        .push("grid", format!("{}x{}", grid.0, grid.1))
        .push("gamma", c.gamma)
        .push("exact", c.exact);
    if let Some(lambda) = cfg.get::<f64>("solver", "lambda")? {
        let sigma: f64 = cfg.get_or("solver", "sigma", reg.sigma())?;
        let n = prior_normalizability_check(&reg.with_sigma(sigma)?, c.gamma, grid, lambda)?;
        r.push("normalizable", n.normalizable)
            .push("tail_slope", n.slope)
            .push("tail_offset", n.offset)
            .push("log_bound", n.log_bound);
        if let Some(w) = n.witness {
            r.push("witness", w);
        }
    }
    Ok(r)
}
