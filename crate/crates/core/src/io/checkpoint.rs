//! `ARRF 1` text checkpoints: named real arrays with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::filter_bank::FilterBank;
use crate::potentials::{Convexity, NoiseScaling, SplinePotential};
use crate::regularizer::{AdaptiveRegularizer, LocalResponse};

const HEADER: &str = "ARRF 1";

pub type NamedArray = (String, ArrayD<f64>);

pub fn format_arrays(arrays: &[NamedArray]) -> Result<String> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for (name, a) in arrays {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("array name {name:?} must be a nonempty word")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("array {name}")));
        }
        let dims: Vec<String> = a.shape().iter().map(|d| d.to_string()).collect();
        let values: Vec<String> = a.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{name}\n{}\n{}", dims.join(" "), values.join(" ")).unwrap();
    }
    Ok(out)
}

pub fn parse_arrays(text: &str, path: &Path) -> Result<Vec<NamedArray>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(Error::format(path, "missing `ARRF 1` header"));
    }
    let mut arrays = Vec::new();
    while let Some(name) = lines.next() {
        let name = name.trim().to_string();
        let dims_line = lines.next().ok_or_else(|| Error::format(path, format!("array {name}: missing dimensions")))?;
        let dims = dims_line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(path, format!("array {name}: bad dimension list {dims_line:?}")))?;
        let count: usize = dims.iter().product();
        let mut values = Vec::with_capacity(count);
        while values.len() < count {
            let line = lines.next().ok_or_else(|| Error::format(path, format!("array {name}: truncated values")))?;
            for token in line.split_whitespace() {
                let v: f64 = token.parse().map_err(|_| Error::format(path, format!("array {name}: bad value {token:?}")))?;
                values.push(v);
            }
        }
        if values.len() != count {
            return Err(Error::format(path, format!("array {name}: expected {count} values, found {}", values.len())));
        }
        let a = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::format(path, e.to_string()))?;
        arrays.push((name, a));
    }
    Ok(arrays)
}

pub fn write_arrays(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_arrays(arrays)?).map_err(|e| Error::io(path, e))
}

pub fn read_arrays(path: impl AsRef<Path>) -> Result<Vec<NamedArray>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_arrays(&text, path)
}

fn vector(values: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap()
}

fn scalar(v: f64) -> ArrayD<f64> {
    vector(&[v])
}

pub fn model_arrays(reg: &AdaptiveRegularizer) -> Vec<NamedArray> {
    let bank = reg.bank();
    let k = bank.kernel_size();
    let kernels: Vec<f64> = bank.kernels().iter().flat_map(|a| a.iter().copied()).collect();
    let p = reg.potential();
    let mut arrays: Vec<NamedArray> = vec![
        ("kernels".into(), ArrayD::from_shape_vec(IxDyn(&[bank.n_channels(), k, k]), kernels).unwrap()),
        ("spacing".into(), scalar(p.spacing())),
        ("psi_plus".into(), vector(p.psi_plus())),
        ("psi_minus".into(), vector(p.psi_minus())),
        ("mu".into(), scalar(p.mu())),
        ("c_cvx".into(), scalar(p.convexity().c_cvx())),
        ("sigma_max".into(), scalar(reg.scalings().first().map_or(0.0, |s| s.sigma_max()))),
        ("sigma".into(), scalar(reg.sigma())),
    ];
    for (c, s) in reg.scalings().iter().enumerate() {
        arrays.push((format!("alpha_knots_{c}"), vector(s.values())));
    }
    arrays
}

fn take<'a>(arrays: &'a [NamedArray], name: &str, path: &Path) -> Result<&'a ArrayD<f64>> {
    arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, a)| a)
        .ok_or_else(|| Error::format(path, format!("checkpoint lacks array `{name}`")))
}

fn take_scalar(arrays: &[NamedArray], name: &str, path: &Path) -> Result<f64> {
    let a = take(arrays, name, path)?;
    if a.len() != 1 {
        return Err(Error::format(path, format!("`{name}` must hold one value")));
    }
    Ok(a.iter().next().copied().unwrap())
}

pub fn model_from_arrays(arrays: &[NamedArray], path: &Path) -> Result<AdaptiveRegularizer> {
    let kernels = take(arrays, "kernels", path)?;
    if kernels.ndim() != 3 || kernels.shape()[1] != kernels.shape()[2] {
        return Err(Error::format(path, "`kernels` must have shape [channels, k, k]"));
    }
    let (c, k) = (kernels.shape()[0], kernels.shape()[1]);
    let kernel_list = (0..c)
        .map(|i| Array2::from_shape_fn((k, k), |(a, b)| kernels[[i, a, b]]))
        .collect();
    let bank = FilterBank::new(kernel_list)?;
    let plus = take(arrays, "psi_plus", path)?.iter().copied().collect::<Vec<_>>();
    let minus = take(arrays, "psi_minus", path)?.iter().copied().collect::<Vec<_>>();
    let potential = SplinePotential::new(
        plus.len() + 1,
        take_scalar(arrays, "spacing", path)?,
        plus,
        minus,
        take_scalar(arrays, "mu", path)?,
        Convexity::from_c_cvx(take_scalar(arrays, "c_cvx", path)?)?,
    )?;
    let sigma_max = take_scalar(arrays, "sigma_max", path)?;
    let scalings = (0..c)
        .map(|i| NoiseScaling::new(take(arrays, &format!("alpha_knots_{i}"), path)?.iter().copied().collect(), sigma_max))
        .collect::<Result<Vec<_>>>()?;
    AdaptiveRegularizer::new(bank, potential, scalings, take_scalar(arrays, "sigma", path)?)
}

pub fn save_model(path: impl AsRef<Path>, reg: &AdaptiveRegularizer, provider: Option<&LocalResponse>) -> Result<()> {
    let mut arrays = model_arrays(reg);
    if let Some(p) = provider {
        arrays.extend(provider_arrays(p));
    }
    write_arrays(path, &arrays)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(AdaptiveRegularizer, Option<LocalResponse>)> {
    let path = path.as_ref();
    let arrays = read_arrays(path)?;
    let model = model_from_arrays(&arrays, path)?;
    let provider = if arrays.iter().any(|(n, _)| n == "mask_gain") { Some(provider_from_arrays(&arrays, path)?) } else { None };
    Ok((model, provider))
}

pub fn provider_arrays(p: &LocalResponse) -> Vec<NamedArray> {
    vec![
        ("mask_gain".into(), scalar(p.gain)),
        ("mask_threshold".into(), scalar(p.threshold)),
        ("mask_offsets".into(), vector(&p.offsets)),
        ("mask_smoothing_width".into(), scalar(p.smoothing_width as f64)),
    ]
}

pub fn provider_from_arrays(arrays: &[NamedArray], path: &Path) -> Result<LocalResponse> {
    let width = take_scalar(arrays, "mask_smoothing_width", path)?;
    if !(width >= 1.0 && width.fract() == 0.0) {
        return Err(Error::format(path, "`mask_smoothing_width` must be a positive integer"));
    }
    Ok(LocalResponse {
        gain: take_scalar(arrays, "mask_gain", path)?,
        threshold: take_scalar(arrays, "mask_threshold", path)?,
        offsets: take(arrays, "mask_offsets", path)?.iter().copied().collect(),
        smoothing_width: width as usize,
    })
}
