//! Plain `[section]` / `key = value` configuration with a fixed key set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Every accepted key, by section.
pub const SCHEMA: &[(&str, &[&str])] = &[
    (
        "problem",
        &[
            "operator",
            "width",
            "height",
            "blur_kernel_size",
            "blur_std",
            "stride",
            "acceleration",
            "center_fraction",
            "mask_seed",
            "angles",
            "detectors",
            "pixel_size",
            "missing_fraction",
            "fidelity",
            "fidelity_sigma",
            "n0",
            "mu_ct",
            "noise",
            "noise_sigma",
        ],
    ),
    ("regularizer", &["checkpoint", "channels", "kernel_size", "knot_count", "spacing", "c_cvx", "mu", "scaling"]),
    ("solver", &["lambda", "sigma", "tol", "max_iters"]),
    ("mask", &["provider", "epsilon", "gain", "threshold", "smoothing_width", "file"]),
    (
        "train",
        &[
            "patch_size",
            "n_patches",
            "validation_patches",
            "sigma_min",
            "sigma_max",
            "batch_size",
            "rate_psi",
            "rate_mu",
            "rate_scaling",
            "rate_mask",
            "epochs",
            "seed",
            "scheduler_epochs",
            "finetune_epochs",
            "finetune_rate",
        ],
    ),
    (
        "analyze",
        &[
            "hoffman_e",
            "hoffman_b",
            "hoffman_f",
            "hoffman_q",
            "probes",
            "pairs",
            "radius",
            "mode",
            "seed",
            "seeds",
            "delta_max",
            "delta_min",
            "levels",
            "rate_c",
            "grid_width",
            "grid_height",
        ],
    ),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config("", "", format!("syntax error: {e}")))?;
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(Error::config("", key, "key outside any section"));
                }
                continue;
            };
            let allowed = SCHEMA
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, keys)| *keys)
                .ok_or_else(|| Error::config(section, "", "unknown section"))?;
            let entry = sections.entry(section.to_string()).or_default();
            for (key, value) in props.iter() {
                if !allowed.contains(&key) {
                    return Err(Error::config(section, key, "unknown key"));
                }
                entry.insert(key.to_string(), value.trim().to_string());
            }
        }
        Ok(Config { sections })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get_str(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(String::as_str)
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.get_str(section, key).is_some()
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.get_str(section, key)
            .map(|raw| raw.parse::<T>().map_err(|_| Error::config(section, key, format!("cannot parse {raw:?}"))))
            .transpose()
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.get(section, key)?.ok_or_else(|| Error::config(section, key, "missing required key"))
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    /// Rows separated by `;`, entries by whitespace or commas.
    pub fn get_matrix(&self, section: &str, key: &str) -> Result<Option<DMatrix<f64>>> {
        let Some(raw) = self.get_str(section, key) else {
            return Ok(None);
        };
        let bad = |msg: &str| Error::config(section, key, msg.to_string());
        let rows = raw
            .split(';')
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .map(|r| {
                r.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad number {t:?}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Some(DMatrix::zeros(0, 0)));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(bad("rows have different lengths"));
        }
        Ok(Some(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])))
    }

    /// Whitespace- or comma-separated list.
    pub fn get_list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        self.get_str(section, key)
            .map(|raw| {
                raw.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<T>().map_err(|_| Error::config(section, key, format!("bad entry {t:?}"))))
                    .collect()
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_access() {
        let c = Config::parse("[solver]\nlambda = 0.5\nmax_iters=100\n[analyze]\nhoffman_e = 1 0; 0 2\nseeds = 1, 2 3\n").unwrap();
        assert_eq!(c.require::<f64>("solver", "lambda").unwrap(), 0.5);
        assert_eq!(c.require::<usize>("solver", "max_iters").unwrap(), 100);
        assert_eq!(c.get_or("solver", "tol", 1e-6).unwrap(), 1e-6);
        let m = c.get_matrix("analyze", "hoffman_e").unwrap().unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        assert_eq!(c.get_list::<u64>("analyze", "seeds").unwrap().unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        match Config::parse("[solver]\nlamda = 1\n") {
            Err(Error::Config { section, key, .. }) => assert_eq!((section.as_str(), key.as_str()), ("solver", "lamda")),
            other => panic!("{other:?}"),
        }
        assert!(Config::parse("[solvers]\n").is_err());
        assert!(Config::parse("lambda = 1\n").is_err());
    }

    #[test]
    fn missing_and_malformed_keys_name_the_key() {
        let c = Config::parse("[solver]\nlambda = abc\n").unwrap();
        assert!(c.require::<f64>("solver", "lambda").unwrap_err().to_string().contains("lambda"));
        assert!(c.require::<f64>("solver", "sigma").unwrap_err().to_string().contains("sigma"));
    }
}
