//! Level grids and the flat key-value experiment config.
//!
//! ```text
//! # global keys
//! model = bf
//! seed = 7
//!
//! [components]
//! levels = -1:1:0.5
//! R = 10
//!
//! [kernel.wide]
//! form = gaussian-mixture
//! components = 1:1, 0.5:2
//! ```
//!
//! Keys in a subcommand section override global keys. `kernel.NAME`
//! sections define custom models: `form = power-series` with
//! `coefficients = c0, c1, ...` (`k(y) = sum c_n y^n`, `y = |x|^2`), or
//! `form = gaussian-mixture` with `components = weight:scale, ...`.

use std::collections::BTreeMap;

use crate::covariance::{IsotropicModel, ModelRegistry};
use crate::error::{Error, Result};

/// Longest grid accepted by [`parse_level_grid`].
pub const MAX_GRID_POINTS: usize = 1_000_000;
const GRID_TOL: f64 = 1e-12;

/// Parses `start:stop:step` (inclusive within 1e-12), a comma list, or a
/// single number. Grid points are computed as `start + k step` and rounded
/// to 12 decimals so that `-3:3:0.1` contains an exact `0`.
pub fn parse_level_grid(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    let bad = |msg: String| Error::Parse { line: 1, msg };
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad(format!("not a number: {:?}", s.trim())))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad(format!("not finite: {v}")))
        }
    };
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [a, b, s] = parts[..] else {
            return Err(bad(format!("expected start:stop:step, got {text:?}")));
        };
        let (start, stop, step) = (num(a)?, num(b)?, num(s)?);
        if !(step > 0.0) {
            return Err(bad(format!("step must be positive, got {step}")));
        }
        if stop < start - GRID_TOL {
            return Err(bad(format!("stop {stop} is below start {start}")));
        }
        let count = ((stop - start) / step + GRID_TOL).floor();
        if !(count < MAX_GRID_POINTS as f64) {
            return Err(bad(format!("grid has more than {MAX_GRID_POINTS} points")));
        }
        let mut out = Vec::with_capacity(count as usize + 1);
        let mut k = 0usize;
        loop {
            let v = start + k as f64 * step;
            if v > stop + GRID_TOL * stop.abs().max(1.0) {
                break;
            }
            out.push(round12(v));
            k += 1;
        }
        Ok(out)
    } else {
        let out = text.split(',').map(num).collect::<Result<Vec<f64>>>()?;
        if out.len() > MAX_GRID_POINTS {
            return Err(bad(format!("grid has more than {MAX_GRID_POINTS} points")));
        }
        Ok(out)
    }
}

fn round12(v: f64) -> f64 {
    if v.abs() < 1e6 {
        let r = (v * 1e12).round() / 1e12;
        if r == 0.0 {
            0.0
        } else {
            r
        }
    } else {
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub global: BTreeMap<String, String>,
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    /// `section.key`, falling back to the global `key`.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .or_else(|| self.global.get(key))
            .map(String::as_str)
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.get(section, key)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Configuration(format!("{key} = {v:?} is not a finite number")))
            })
            .transpose()
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.get(section, key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Configuration(format!("{key} = {v:?} is not a non-negative integer")))
            })
            .transpose()
    }

    /// Adds every `kernel.NAME` section to `registry`.
    pub fn register_kernels(&self, registry: &mut ModelRegistry) -> Result<()> {
        for (name, keys) in &self.sections {
            let Some(kernel) = name.strip_prefix("kernel.") else { continue };
            if kernel.is_empty() {
                return Err(Error::Configuration("kernel section without a name".into()));
            }
            let need = |k: &str| {
                keys.get(k)
                    .ok_or_else(|| Error::Configuration(format!("[{name}] is missing `{k}`")))
            };
            let floats = |s: &str| -> Result<Vec<f64>> {
                s.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| Error::Configuration(format!("[{name}]: bad number {:?}", v.trim())))
                    })
                    .collect()
            };
            let model = match need("form")?.as_str() {
                "power-series" => IsotropicModel::power_series(kernel, floats(need("coefficients")?)?)?,
                "gaussian-mixture" => {
                    let comps = need("components")?
                        .split(',')
                        .map(|c| {
                            let (w, s) = c
                                .split_once(':')
                                .ok_or_else(|| Error::Configuration(format!("[{name}]: expected weight:scale, got {c:?}")))?;
                            let v = floats(&format!("{w},{s}"))?;
                            Ok((v[0], v[1]))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    IsotropicModel::gaussian_mixture(kernel, comps)?
                }
                other => return Err(Error::Configuration(format!("[{name}]: unknown form {other:?}"))),
            };
            registry.register(model);
        }
        Ok(())
    }
}

/// Parses the config text. Blank lines and lines starting with `#` or `;`
/// are ignored; a repeated key in one section is an error.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut section: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?
                .trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(err(format!("bad section name {name:?}")));
            }
            cfg.sections.entry(name.to_string()).or_default();
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
            return Err(err(format!("bad key {key:?}")));
        }
        let map = match &section {
            Some(s) => cfg.sections.get_mut(s).unwrap(),
            None => &mut cfg.global,
        };
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(err(format!("duplicate key {key:?}")));
        }
    }
    Ok(cfg)
}
