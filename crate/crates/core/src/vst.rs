//! Generalized Anscombe transform, its closed-form unbiased inverse, and the
//! min-max normalization applied before denoising.
//!
//! Every transform comes in two forms: a plain one on [`Tensor`] and a
//! differentiable one on [`Var`] built from tape ops.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::noise::{NoiseParams, SynthesisMode};
use crate::tensor::Tensor;

/// Inputs to the inverse transform must exceed this.
pub const IAT_GUARD: f64 = 0.1;

const SQRT_3_2: f64 = 1.224_744_871_391_589;

/// Per-image offset and range of the normalized transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationInfo {
    pub m: f64,
    pub beta: f64,
}

impl NormalizationInfo {
    /// Noise variance of the normalized image under unit-variance stabilization.
    pub fn noise_variance(&self) -> f64 {
        1.0 / (self.beta * self.beta)
    }
}

#[inline]
pub fn gat_value(y: f64, p: NoiseParams) -> f64 {
    let a = p.alpha;
    let radicand = a * y + 0.375 * a * a + p.sigma * p.sigma;
    2.0 / a * radicand.max(0.0).sqrt()
}

pub fn gat(y: &Tensor, p: NoiseParams) -> Result<Tensor> {
    let p = NoiseParams::new(p.alpha, p.sigma)?;
    Ok(y.map(|v| gat_value(v, p)))
}

/// Differentiable transform; `alpha` and `sigma` broadcast against `y`.
pub fn gat_var<'t>(y: Var<'t>, alpha: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    let a = alpha.value();
    if a.data().iter().any(|&v| v < crate::noise::ALPHA_FLOOR) {
        return Err(Error::InvalidParameter("alpha below floor".into()));
    }
    let radicand = y
        .mul(&alpha)?
        .add(&alpha.square()?.scale(0.375)?)?
        .add(&sigma.square()?)?;
    radicand.clamp_min(0.0)?.sqrt()?.div(&alpha)?.scale(2.0)
}

pub fn normalize(g: &Tensor) -> Result<(Tensor, NormalizationInfo)> {
    let (m, hi) = (g.min(), g.max());
    let beta = hi - m;
    if !(beta > 0.0) {
        return Err(Error::ConstantImage);
    }
    Ok((g.map(|v| (v - m) / beta), NormalizationInfo { m, beta }))
}

/// Differentiable normalization; gradients also flow through the min and max.
pub fn normalize_var(g: Var<'_>) -> Result<(Var<'_>, NormalizationInfo)> {
    let lo = g.reduce_min()?;
    let hi = g.reduce_max()?;
    let beta = hi.sub(&lo)?;
    let info = NormalizationInfo {
        m: lo.item(),
        beta: beta.item(),
    };
    if !(info.beta > 0.0) {
        return Err(Error::ConstantImage);
    }
    Ok((g.sub(&lo)?.div(&beta)?, info))
}

pub fn denormalize(z: &Tensor, info: NormalizationInfo) -> Tensor {
    z.map(|v| v * info.beta + info.m)
}

pub fn denormalize_var(z: Var<'_>, info: NormalizationInfo) -> Result<Var<'_>> {
    z.scale(info.beta)?.offset(info.m)
}

/// Closed-form inverse in the Poisson-count domain, before mode scaling.
#[inline]
pub fn iat_value(d: f64, p: NoiseParams) -> f64 {
    let r = p.sigma / p.alpha;
    let inv = 1.0 / d;
    0.25 * d * d + 0.25 * SQRT_3_2 * inv - 1.375 * inv * inv + 0.625 * SQRT_3_2 * inv * inv * inv
        - 0.125
        - r * r
}

/// Algebraic inverse `D^2/4 - 1/8 - sigma^2/alpha^2`, used below the guard.
#[inline]
pub fn algebraic_inverse(d: f64, p: NoiseParams) -> f64 {
    let r = p.sigma / p.alpha;
    0.25 * d * d - 0.125 - r * r
}

fn mode_scale(p: NoiseParams, mode: SynthesisMode) -> f64 {
    match mode {
        SynthesisMode::Literal => 1.0,
        SynthesisMode::MeanPreserving => p.alpha,
    }
}

/// Inverse transform without the final clip. Fails if any `D <= 0.1`.
pub fn iat_unclipped(d: &Tensor, p: NoiseParams, mode: SynthesisMode) -> Result<Tensor> {
    let p = NoiseParams::new(p.alpha, p.sigma)?;
    if let Some(&bad) = d.data().iter().find(|&&v| !(v > IAT_GUARD)) {
        return Err(Error::BelowGuard(bad));
    }
    let s = mode_scale(p, mode);
    Ok(d.map(|v| s * iat_value(v, p)))
}

/// Inverse transform clipped to `[0, 1]`. Fails if any `D <= 0.1`.
pub fn iat(d: &Tensor, p: NoiseParams, mode: SynthesisMode) -> Result<Tensor> {
    Ok(iat_unclipped(d, p, mode)?.clamp(0.0, 1.0))
}

/// Inverse transform clipped to `[0, 1]` that falls back to the algebraic
/// inverse for pixels at or below the guard instead of failing.
pub fn iat_guarded(d: &Tensor, p: NoiseParams, mode: SynthesisMode) -> Result<Tensor> {
    let p = NoiseParams::new(p.alpha, p.sigma)?;
    let s = mode_scale(p, mode);
    let out = d.map(|v| {
        let x = if v > IAT_GUARD {
            iat_value(v, p)
        } else {
            algebraic_inverse(v, p)
        };
        (s * x).clamp(0.0, 1.0)
    });
    out.check_finite("iat")
}

/// Differentiable unclipped inverse; `alpha` and `sigma` broadcast.
pub fn iat_var<'t>(d: Var<'t>, alpha: Var<'t>, sigma: Var<'t>, mode: SynthesisMode) -> Result<Var<'t>> {
    if let Some(&bad) = d.value().data().iter().find(|&&v| !(v > IAT_GUARD)) {
        return Err(Error::BelowGuard(bad));
    }
    let ratio = sigma.div(&alpha)?.square()?;
    let x = d
        .square()?
        .scale(0.25)?
        .add(&d.powi(-1)?.scale(0.25 * SQRT_3_2)?)?
        .add(&d.powi(-2)?.scale(-1.375)?)?
        .add(&d.powi(-3)?.scale(0.625 * SQRT_3_2)?)?
        .offset(-0.125)?
        .sub(&ratio)?;
    match mode {
        SynthesisMode::Literal => Ok(x),
        SynthesisMode::MeanPreserving => x.mul(&alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, Tape};

    fn np(a: f64, s: f64) -> NoiseParams {
        NoiseParams::new(a, s).unwrap()
    }

    #[test]
    fn gat_examples() {
        assert!((gat_value(1.0, np(1.0, 0.0)) - 2.345_207_879_911_715).abs() < 1e-12);
        assert!((gat_value(0.0, np(2.0, 0.0)) - 1.224_744_871_391_589).abs() < 1e-12);
        // 20 * sqrt(0.05 + 0.00375 + 0.0004)
        assert!((gat_value(0.5, np(0.1, 0.02)) - 4.654_030_511_288_038).abs() < 1e-9);
    }

    #[test]
    fn gat_tensor_matches_tape() {
        let y = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 / 15.0);
        let p = np(0.07, 0.03);
        let plain = gat(&y, p).unwrap();
        let tape = Tape::new();
        let g = gat_var(tape.constant(y), tape.scalar(p.alpha), tape.scalar(p.sigma)).unwrap();
        assert!(plain.max_abs_diff(&g.value()) < 1e-12);
    }

    #[test]
    fn gat_monotone() {
        let p = np(0.05, 0.01);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let v = gat_value(i as f64 / 100.0, p);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn radicand_clamped() {
        // alpha*y + 3/8 alpha^2 < 0 for sufficiently negative y
        assert_eq!(gat_value(-1.0, np(0.1, 0.0)), 0.0);
    }

    #[test]
    fn normalize_examples() {
        let g = Tensor::new(&[2], vec![2.0, 4.0]).unwrap();
        let (z, info) = normalize(&g).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0]);
        assert_eq!(info, NormalizationInfo { m: 2.0, beta: 2.0 });
        assert!(matches!(normalize(&Tensor::full(&[4], 3.0)), Err(Error::ConstantImage)));
        let info = NormalizationInfo { m: 1.0, beta: 2.0 };
        let d = denormalize(&Tensor::new(&[3], vec![0.0, 1.0, 0.5]).unwrap(), info);
        assert_eq!(d.data(), &[1.0, 3.0, 2.0]);
    }

    #[test]
    fn normalize_round_trip() {
        let g = Tensor::from_fn(&[50], |i| ((i * 7919) % 101) as f64 * 0.37 - 3.0);
        let (z, info) = normalize(&g).unwrap();
        assert_eq!(z.min(), 0.0);
        assert_eq!(z.max(), 1.0);
        assert!(denormalize(&z, info).max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn iat_term_by_term() {
        let v = iat_value(2.0, np(1.0, 0.0));
        // 1 + 0.153093 - 0.34375 + 0.095683 - 0.125
        assert!((v - 0.780_026).abs() < 1e-6, "{v}");
        let d = Tensor::new(&[1], vec![2.0]).unwrap();
        assert!((iat_unclipped(&d, np(1.0, 0.0), SynthesisMode::Literal).unwrap().data()[0] - v).abs() < 1e-15);
    }

    #[test]
    fn iat_asymptotics() {
        let p = np(0.5, 0.2);
        let r2 = (0.2f64 / 0.5).powi(2);
        let d = 1e4;
        let rem = iat_value(d, p) - 0.25 * d * d;
        assert!((rem - (-0.125 - r2)).abs() < 1e-4);
    }

    #[test]
    fn iat_guard() {
        let d = Tensor::new(&[2], vec![0.05, 3.0]).unwrap();
        assert!(matches!(iat(&d, np(1.0, 0.0), SynthesisMode::Literal), Err(Error::BelowGuard(_))));
        let out = iat_guarded(&d, np(1.0, 0.0), SynthesisMode::Literal).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gradchecks() {
        let y = Tensor::from_fn(&[1, 1, 3, 3], |i| 0.1 + 0.08 * i as f64);
        let inputs = [y, Tensor::scalar(0.07), Tensor::scalar(0.03)];
        let reports = gradcheck(&inputs, 1e-6, |_, v| gat_var(v[0], v[1], v[2])?.reduce_sum()).unwrap();
        for r in &reports {
            assert!(r.passes(1e-4), "{r:?}");
        }

        let g = Tensor::from_fn(&[1, 1, 3, 3], |i| ((i * 5) % 9) as f64 * 0.3 + 1.0);
        let weights = Tensor::from_fn(&[1, 1, 3, 3], |i| 0.5 + 0.1 * i as f64);
        let reports = gradcheck(&[g, weights], 1e-6, |_, v| {
            let (z, _) = normalize_var(v[0])?;
            z.mul(&v[1])?.reduce_sum()
        })
        .unwrap();
        assert!(reports[0].passes(1e-4), "{:?}", reports[0]);

        let d = Tensor::from_fn(&[1, 1, 2, 3], |i| 1.5 + 0.7 * i as f64);
        for mode in [SynthesisMode::Literal, SynthesisMode::MeanPreserving] {
            let inputs = [d.clone(), Tensor::scalar(0.2), Tensor::scalar(0.05)];
            let reports = gradcheck(&inputs, 1e-6, |_, v| iat_var(v[0], v[1], v[2], mode)?.reduce_sum()).unwrap();
            for r in &reports {
                assert!(r.passes(1e-4), "{mode}: {r:?}");
            }
        }
    }
}
