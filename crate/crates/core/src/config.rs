//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. Keys not present keep their defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::DenoiserTrainConfig;
use crate::error::{Error, Result};
use crate::noise::SynthesisMode;
use crate::optim::AdamConfig;
use crate::pge::{PgeConfig, PgeTrainConfig};
use crate::var_est::EstimatorConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: SynthesisMode,
    /// Per-image noise parameters for synthesis are drawn uniformly from these.
    pub alpha_range: (f64, f64),
    pub sigma_range: (f64, f64),
    /// Builtin network name or path to a network description file.
    pub net: String,
    pub estimator: EstimatorConfig,
    pub pge_channels: [usize; 3],
    pub pge_epochs: usize,
    pub pge_batch_size: usize,
    pub pge_lr: f64,
    /// Training patches drawn from the data and their side length.
    pub pge_patches: usize,
    pub pge_patch_size: usize,
    pub denoiser_epochs: usize,
    pub denoiser_batch_size: usize,
    pub denoiser_lr: f64,
    pub patch_size: usize,
    pub crops_per_image: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pge = PgeTrainConfig::default();
        let den = DenoiserTrainConfig::default();
        Self {
            seed: 0,
            mode: SynthesisMode::default(),
            alpha_range: (0.01, 0.01),
            sigma_range: (0.02, 0.02),
            net: "fbi-safe-17".into(),
            estimator: EstimatorConfig::default(),
            pge_channels: PgeConfig::default().channels,
            pge_epochs: pge.epochs,
            pge_batch_size: pge.batch_size,
            pge_lr: pge.adam.lr,
            pge_patches: 200,
            pge_patch_size: 64,
            denoiser_epochs: den.epochs,
            denoiser_batch_size: den.batch_size,
            denoiser_lr: den.adam.lr,
            patch_size: den.patch_size,
            crops_per_image: den.crops_per_image,
            data: None,
            out: None,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "seed",
    "mode",
    "alpha_range",
    "sigma_range",
    "net",
    "estimator.patch_size",
    "estimator.stride",
    "estimator.tol",
    "pge.channels",
    "pge.epochs",
    "pge.batch_size",
    "pge.lr",
    "pge.patches",
    "pge.patch_size",
    "denoiser.epochs",
    "denoiser.batch_size",
    "denoiser.lr",
    "denoiser.patch_size",
    "denoiser.crops_per_image",
    "data",
    "out",
];

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::RunConfig {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str, n: usize) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| parse(line, key, s.trim()))
        .collect::<Result<_>>()?;
    if items.len() != n {
        return Err(Error::RunConfig {
            line,
            msg: format!("{key} needs {n} comma-separated values"),
        });
    }
    Ok(items)
}

fn parse_range(line: usize, key: &str, v: &str) -> Result<(f64, f64)> {
    let r = parse_list::<f64>(line, key, v, 2)?;
    if !(r[0] <= r[1]) {
        return Err(Error::RunConfig {
            line,
            msg: format!("{key} lower bound exceeds upper bound"),
        });
    }
    Ok((r[0], r[1]))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::RunConfig {
                line,
                msg: "expected key = value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::RunConfig {
                    line,
                    msg: format!("duplicate key {k}"),
                });
            }
            seen.push(k);
            cfg.set(line, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(line, key, v)?,
            "mode" => {
                self.mode = v.parse().map_err(|e: Error| Error::RunConfig {
                    line,
                    msg: e.to_string(),
                })?
            }
            "alpha_range" => self.alpha_range = parse_range(line, key, v)?,
            "sigma_range" => self.sigma_range = parse_range(line, key, v)?,
            "net" => self.net = v.to_string(),
            "estimator.patch_size" => self.estimator.patch_size = parse(line, key, v)?,
            "estimator.stride" => self.estimator.stride = parse(line, key, v)?,
            "estimator.tol" => self.estimator.tol_rel = parse(line, key, v)?,
            "pge.channels" => {
                let c = parse_list(line, key, v, 3)?;
                self.pge_channels = [c[0], c[1], c[2]];
            }
            "pge.epochs" => self.pge_epochs = parse(line, key, v)?,
            "pge.batch_size" => self.pge_batch_size = parse(line, key, v)?,
            "pge.lr" => self.pge_lr = parse(line, key, v)?,
            "pge.patches" => self.pge_patches = parse(line, key, v)?,
            "pge.patch_size" => self.pge_patch_size = parse(line, key, v)?,
            "denoiser.epochs" => self.denoiser_epochs = parse(line, key, v)?,
            "denoiser.batch_size" => self.denoiser_batch_size = parse(line, key, v)?,
            "denoiser.lr" => self.denoiser_lr = parse(line, key, v)?,
            "denoiser.patch_size" => self.patch_size = parse(line, key, v)?,
            "denoiser.crops_per_image" => self.crops_per_image = parse(line, key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            other => {
                return Err(Error::RunConfig {
                    line,
                    msg: format!("unknown key {other}"),
                })
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::RunConfig { line: 0, msg });
        self.estimator.validate()?;
        if self.alpha_range.0 <= 0.0 || self.sigma_range.0 < 0.0 {
            return bad("noise ranges must have alpha > 0 and sigma >= 0".into());
        }
        if self.pge_channels.contains(&0) {
            return bad("pge.channels must be positive".into());
        }
        for (name, v) in [
            ("pge.batch_size", self.pge_batch_size),
            ("pge.patches", self.pge_patches),
            ("denoiser.batch_size", self.denoiser_batch_size),
            ("denoiser.patch_size", self.patch_size),
            ("denoiser.crops_per_image", self.crops_per_image),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.pge_patch_size == 0 || !self.pge_patch_size.is_multiple_of(4) {
            return bad("pge.patch_size must be a positive multiple of 4".into());
        }
        if !(self.pge_lr > 0.0) || !(self.denoiser_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn pge(&self) -> PgeConfig {
        PgeConfig {
            channels: self.pge_channels,
            estimator: self.estimator,
        }
    }

    pub fn pge_train(&self) -> PgeTrainConfig {
        PgeTrainConfig {
            epochs: self.pge_epochs,
            batch_size: self.pge_batch_size,
            adam: AdamConfig {
                lr: self.pge_lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn denoiser_train(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            epochs: self.denoiser_epochs,
            batch_size: self.denoiser_batch_size,
            patch_size: self.patch_size,
            crops_per_image: self.crops_per_image,
            adam: AdamConfig {
                lr: self.denoiser_lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }
}

/// Resolved configuration in the same syntax [`RunConfig::parse`] accepts.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.pge_channels;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "alpha_range = {},{}", self.alpha_range.0, self.alpha_range.1)?;
        writeln!(f, "sigma_range = {},{}", self.sigma_range.0, self.sigma_range.1)?;
        writeln!(f, "net = {}", self.net)?;
        writeln!(f, "estimator.patch_size = {}", self.estimator.patch_size)?;
        writeln!(f, "estimator.stride = {}", self.estimator.stride)?;
        writeln!(f, "estimator.tol = {}", self.estimator.tol_rel)?;
        writeln!(f, "pge.channels = {},{},{}", c[0], c[1], c[2])?;
        writeln!(f, "pge.epochs = {}", self.pge_epochs)?;
        writeln!(f, "pge.batch_size = {}", self.pge_batch_size)?;
        writeln!(f, "pge.lr = {}", self.pge_lr)?;
        writeln!(f, "pge.patches = {}", self.pge_patches)?;
        writeln!(f, "pge.patch_size = {}", self.pge_patch_size)?;
        writeln!(f, "denoiser.epochs = {}", self.denoiser_epochs)?;
        writeln!(f, "denoiser.batch_size = {}", self.denoiser_batch_size)?;
        writeln!(f, "denoiser.lr = {}", self.denoiser_lr)?;
        writeln!(f, "denoiser.patch_size = {}", self.patch_size)?;
        writeln!(f, "denoiser.crops_per_image = {}", self.crops_per_image)?;
        if let Some(d) = &self.data {
            writeln!(f, "data = {}", d.display())?;
        }
        if let Some(o) = &self.out {
            writeln!(f, "out = {}", o.display())?;
        }
        Ok(())
    }
}
