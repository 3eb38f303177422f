//! Eigenvalue-based estimate of additive white Gaussian noise variance.
//!
//! The covariance of overlapping patches has a cluster of small eigenvalues
//! coming from noise alone, while image structure adds a few large ones that
//! pull the mean of the spectrum above its median. Starting from the full
//! spectrum, the largest eigenvalues are dropped until the mean of those left
//! is no larger than their median; that mean is the estimate.
//!
//! The estimate is differentiable w.r.t. the image: the selected set is held
//! fixed and the gradient flows through the selected eigenvalues.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub tol_rel: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            patch_size: 7,
            stride: 3,
            tol_rel: 1e-3,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.stride < 1 || !(self.tol_rel >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid estimator config {self:?}")));
        }
        Ok(())
    }

    /// Patches required for a full-rank covariance.
    pub fn min_patches(&self) -> usize {
        self.patch_size * self.patch_size + 1
    }

    pub fn patch_count(&self, h: usize, w: usize) -> usize {
        if h < self.patch_size || w < self.patch_size {
            return 0;
        }
        ((h - self.patch_size) / self.stride + 1) * ((w - self.patch_size) / self.stride + 1)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Number of smallest eigenvalues kept for ascending `eigs`.
pub fn select_count(eigs: &[f64], tol_rel: f64) -> usize {
    let mut prefix = 0.0;
    let sums: Vec<f64> = eigs
        .iter()
        .map(|v| {
            prefix += v;
            prefix
        })
        .collect();
    for i in (1..=eigs.len()).rev() {
        let mean = sums[i - 1] / i as f64;
        let med = median(&eigs[..i]);
        if mean <= med * (1.0 + tol_rel) {
            return i;
        }
    }
    1
}

/// Outcome of one estimate beyond the value itself.
#[derive(Clone, Debug)]
pub struct EtaDetail {
    pub eigenvalues: Vec<f64>,
    pub selected: usize,
}

fn check_image(z: &Tensor, cfg: &EstimatorConfig) -> Result<()> {
    cfg.validate()?;
    let (h, w) = match z.shape() {
        [1, 1, h, w] | [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                op: "eta",
                reason: format!("expected one single-channel image, got {s:?}"),
            })
        }
    };
    let found = cfg.patch_count(h, w);
    if found < cfg.min_patches() {
        return Err(Error::TooFewPatches {
            found,
            needed: cfg.min_patches(),
        });
    }
    Ok(())
}

/// Differentiable noise-variance estimate of a single-channel image.
pub fn eta_var<'t>(z: Var<'t>, cfg: &EstimatorConfig) -> Result<(Var<'t>, EtaDetail)> {
    check_image(&z.value(), cfg)?;
    eta_from_patches(z.gather_patches(cfg.patch_size, cfg.stride)?, cfg.tol_rel)
}

/// Estimate from a `(patches, dim)` matrix of flattened patches.
pub fn eta_from_patches<'t>(patches: Var<'t>, tol_rel: f64) -> Result<(Var<'t>, EtaDetail)> {
    let cov = patches.covariance()?;
    let (eigs, decomposition) = cov.symmetric_eig()?;
    let selected = select_count(&decomposition.values, tol_rel);
    let idx: Vec<usize> = (0..selected).collect();
    let est = eigs.index_select(&idx)?.reduce_mean()?.clamp_min(0.0)?;
    Ok((
        est,
        EtaDetail {
            eigenvalues: decomposition.values.clone(),
            selected,
        },
    ))
}

pub fn eta(z: &Tensor, cfg: &EstimatorConfig) -> Result<f64> {
    Ok(eta_detailed(z, cfg)?.0)
}

pub fn eta_detailed(z: &Tensor, cfg: &EstimatorConfig) -> Result<(f64, EtaDetail)> {
    let tape = Tape::new();
    let (v, detail) = eta_var(tape.constant(z.clone()), cfg)?;
    Ok((v.item(), detail))
}

/// Finite-difference check of the estimate's image gradient.
#[derive(Clone, Debug)]
pub struct EtaGradcheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Pixels whose perturbation changed the selected eigenvalue count.
    pub boundary_ties: usize,
    pub checked: usize,
}

impl EtaGradcheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare `d eta / d Z` with central differences of step `h`. Pixels where
/// the perturbation moves the selection boundary are counted and skipped.
pub fn eta_gradcheck(z: &Tensor, cfg: &EstimatorConfig, h: f64) -> Result<EtaGradcheck> {
    let tape = Tape::new();
    let zv = tape.var(z.clone());
    let (est, detail) = eta_var(zv, cfg)?;
    let grads = tape.backward(est)?;
    let analytic = grads
        .wrt(zv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(z.shape()));

    let mut work = z.clone();
    let mut numeric = Vec::with_capacity(z.numel());
    let mut ties = 0;
    for i in 0..z.numel() {
        let orig = z.data()[i];
        work.data_mut()[i] = orig + h;
        let (fp, dp) = eta_detailed(&work, cfg)?;
        work.data_mut()[i] = orig - h;
        let (fm, dm) = eta_detailed(&work, cfg)?;
        work.data_mut()[i] = orig;
        if dp.selected != detail.selected || dm.selected != detail.selected {
            ties += 1;
            numeric.push(None);
        } else {
            numeric.push(Some((fp - fm) / (2.0 * h)));
        }
    }
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-15;
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.data().iter().zip(&numeric) {
        if let Some(n) = n {
            let diff = (a - n).abs();
            max_abs = max_abs.max(diff);
            max_rel = max_rel.max(diff / a.abs().max(n.abs()).max(floor));
        }
    }
    Ok(EtaGradcheck {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        boundary_ties: ties,
        checked: z.numel() - ties,
    })
}
