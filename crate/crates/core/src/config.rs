//! `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys are the field names of [`TrainConfig`] and [`EvolutionConfig`];
//! `f` and `l` are accepted as short names for `half_window` and `steps`.
//!
//! [`EvolutionConfig`]: crate::evolution::EvolutionConfig

use std::path::Path;

use crate::error::{Error, Result};
use crate::evolution::DataForce;
use crate::train::TrainConfig;

/// Every key understood by [`apply`].
pub const KEYS: &[&str] = &[
    "alpha0",
    "epochs",
    "batch_size",
    "seed",
    "width_divisor",
    "constant_lambda",
    "batch_norm",
    "flip",
    "val_every",
    "patience",
    "clip_norm",
    "mu",
    "epsilon",
    "dt",
    "steps",
    "half_window",
    "eta",
    "curvature_floor",
    "nu",
    "data_force",
    "dirac_in_data",
];

/// Parses `key = value` lines into pairs, keeping line numbers.
pub fn parse(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config {
                line: i + 1,
                message: "empty key or value".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("bad value {v:?} for {key}"),
    })
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config {
            line,
            message: format!("bad boolean {v:?} for {key}"),
        }),
    }
}

/// Sets one key. `line` is only used for error messages (0 for flags).
pub fn set(cfg: &mut TrainConfig, line: usize, key: &str, v: &str) -> Result<()> {
    let e = &mut cfg.evolution;
    match key {
        "alpha0" => cfg.alpha0 = value(line, key, v)?,
        "epochs" => cfg.epochs = value(line, key, v)?,
        "batch_size" => cfg.batch_size = value(line, key, v)?,
        "seed" => cfg.seed = value(line, key, v)?,
        "width_divisor" => cfg.width_divisor = value(line, key, v)?,
        "constant_lambda" => cfg.constant_lambda = flag(line, key, v)?,
        "batch_norm" => cfg.batch_norm = flag(line, key, v)?,
        "flip" => cfg.flip = flag(line, key, v)?,
        "val_every" => cfg.val_every = value(line, key, v)?,
        "patience" => {
            cfg.patience = match v {
                "none" | "off" => None,
                _ => Some(value(line, key, v)?),
            }
        }
        "clip_norm" => {
            cfg.clip_norm = match v {
                "none" | "off" => None,
                _ => Some(value(line, key, v)?),
            }
        }
        "mu" => e.mu = value(line, key, v)?,
        "epsilon" => e.epsilon = value(line, key, v)?,
        "dt" => e.dt = value(line, key, v)?,
        "steps" | "l" => e.steps = value(line, key, v)?,
        "half_window" | "f" => e.half_window = value(line, key, v)?,
        "eta" => e.eta = value(line, key, v)?,
        "curvature_floor" => e.curvature_floor = value(line, key, v)?,
        "nu" => e.nu = value(line, key, v)?,
        "data_force" => {
            e.data_force = match v {
                "pointwise" => DataForce::Pointwise,
                "windowed" => DataForce::Windowed,
                _ => {
                    return Err(Error::Config {
                        line,
                        message: format!("data_force must be pointwise or windowed, got {v:?}"),
                    })
                }
            }
        }
        "dirac_in_data" => e.dirac_in_data = flag(line, key, v)?,
        _ => {
            return Err(Error::Config {
                line,
                message: format!("unknown key {key:?}"),
            })
        }
    }
    Ok(())
}

/// Applies every setting in `text` on top of `cfg`.
pub fn apply(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (line, k, v) in parse(text)? {
        set(cfg, line, &k, &v)?;
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = TrainConfig::default();
    apply(&mut cfg, &text)?;
    Ok(cfg)
}

/// Writes every key of `cfg` in a form [`apply`] reads back.
pub fn render(cfg: &TrainConfig) -> String {
    let e = &cfg.evolution;
    let patience = cfg.patience.map_or("none".to_string(), |p| p.to_string());
    let clip = cfg.clip_norm.map_or("none".to_string(), |c| c.to_string());
    let force = match e.data_force {
        DataForce::Pointwise => "pointwise",
        DataForce::Windowed => "windowed",
    };
    let pairs: [(&str, String); 21] = [
        ("alpha0", cfg.alpha0.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("seed", cfg.seed.to_string()),
        ("width_divisor", cfg.width_divisor.to_string()),
        ("constant_lambda", cfg.constant_lambda.to_string()),
        ("batch_norm", cfg.batch_norm.to_string()),
        ("flip", cfg.flip.to_string()),
        ("val_every", cfg.val_every.to_string()),
        ("patience", patience),
        ("clip_norm", clip),
        ("mu", e.mu.to_string()),
        ("epsilon", e.epsilon.to_string()),
        ("dt", e.dt.to_string()),
        ("steps", e.steps.to_string()),
        ("half_window", e.half_window.to_string()),
        ("eta", e.eta.to_string()),
        ("curvature_floor", e.curvature_floor.to_string()),
        ("nu", e.nu.to_string()),
        ("data_force", force.to_string()),
        ("dirac_in_data", e.dirac_in_data.to_string()),
    ];
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
