//! Poisson-Gaussian noise: `Y = alpha * P + N`, `N ~ N(0, sigma^2)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{self, stage};
use crate::tensor::Tensor;

/// Smallest admissible gain; the transform divides by it.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseParams {
    pub fn new(alpha: f64, sigma: f64) -> Result<Self> {
        if !(alpha >= ALPHA_FLOOR) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha {alpha} below floor {ALPHA_FLOOR}"
            )));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma {sigma} must be >= 0")));
        }
        Ok(Self { alpha, sigma })
    }
}

/// How the Poisson component relates to the clean intensity.
///
/// `Literal` draws `P ~ Poisson(x)`, so `E[Y] = alpha x`. `MeanPreserving`
/// draws `P ~ Poisson(x / alpha)`, so `E[Y] = x`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SynthesisMode {
    Literal,
    #[default]
    MeanPreserving,
}

impl FromStr for SynthesisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "mean-preserving" | "mean_preserving" => Ok(Self::MeanPreserving),
            other => Err(Error::InvalidParameter(format!("unknown synthesis mode {other}"))),
        }
    }
}

impl fmt::Display for SynthesisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::MeanPreserving => "mean-preserving",
        })
    }
}

fn check_intensity(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what: "clean intensity",
            value: x,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

/// Conditional variance of a noisy pixel with clean intensity `x`.
pub fn pg_variance(x: f64, p: NoiseParams, mode: SynthesisMode) -> Result<f64> {
    check_intensity(x)?;
    let s2 = p.sigma * p.sigma;
    Ok(match mode {
        SynthesisMode::Literal => p.alpha * p.alpha * x + s2,
        SynthesisMode::MeanPreserving => p.alpha * x + s2,
    })
}

/// Noisy observation of `clean`, clipped to `[0, 1]`.
pub fn synthesize(clean: &Tensor, p: NoiseParams, mode: SynthesisMode, seed: u64) -> Result<Tensor> {
    Ok(synthesize_unclipped(clean, p, mode, seed)?.clamp(0.0, 1.0))
}

/// Noisy observation without the final clip.
pub fn synthesize_unclipped(
    clean: &Tensor,
    p: NoiseParams,
    mode: SynthesisMode,
    seed: u64,
) -> Result<Tensor> {
    let p = NoiseParams::new(p.alpha, p.sigma)?;
    for &x in clean.data() {
        check_intensity(x)?;
    }
    let mut rng = rng::stage_stream(seed, stage::SYNTH);
    Ok(clean.map(|x| {
        let mean = match mode {
            SynthesisMode::Literal => x,
            SynthesisMode::MeanPreserving => x / p.alpha,
        };
        let counts = rng::poisson(&mut rng, mean) as f64;
        p.alpha * counts + p.sigma * rng::normal(&mut rng)
    }))
}

/// Uniform sampling box for noise-level mixtures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureRanges {
    pub alpha: (f64, f64),
    pub sigma: (f64, f64),
}

impl Default for MixtureRanges {
    fn default() -> Self {
        Self {
            alpha: (0.0, 0.16 * 0.16),
            sigma: (0.0, 0.06),
        }
    }
}

/// Independent uniform draws of `(alpha, sigma)`, alpha floored.
pub fn sample_mixture(ranges: MixtureRanges, count: usize, seed: u64) -> Result<Vec<NoiseParams>> {
    for (name, (lo, hi)) in [("alpha", ranges.alpha), ("sigma", ranges.sigma)] {
        if !(lo < hi) || lo < 0.0 || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("empty {name} range [{lo}, {hi}]")));
        }
    }
    let mut rng = rng::stage_stream(seed, stage::MIXTURE);
    (0..count)
        .map(|_| {
            use rand::Rng;
            let a: f64 = rng.random_range(ranges.alpha.0..ranges.alpha.1);
            let s: f64 = rng.random_range(ranges.sigma.0..ranges.sigma.1);
            NoiseParams::new(a.max(ALPHA_FLOOR), s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var_of(t: &Tensor) -> (f64, f64) {
        let m = t.mean();
        let v = t.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (t.numel() - 1) as f64;
        (m, v)
    }

    #[test]
    fn variance_law_examples() {
        let p = NoiseParams::new(0.1, 0.02).unwrap();
        let v = pg_variance(0.5, p, SynthesisMode::Literal).unwrap();
        assert!((v - 0.0054).abs() < 1e-15);
        let p = NoiseParams::new(0.3, 0.02).unwrap();
        let v = pg_variance(0.0, p, SynthesisMode::Literal).unwrap();
        assert!((v - 0.0004).abs() < 1e-15);
        assert!(NoiseParams::new(0.0, 0.02).is_err());
        assert!(pg_variance(1.5, p, SynthesisMode::Literal).is_err());
    }

    #[test]
    fn zero_signal_is_pure_gaussian() {
        let n = 1_000_000;
        let clean = Tensor::zeros(&[n]);
        let p = NoiseParams::new(0.1, 0.02).unwrap();
        let y = synthesize_unclipped(&clean, p, SynthesisMode::Literal, 3).unwrap();
        let (_, v) = var_of(&y);
        let sd = v.sqrt();
        // SE of the sample std is sigma / sqrt(2n)
        assert!((sd - 0.02).abs() < 3.0 * 0.02 / (2.0 * n as f64).sqrt());
    }

    #[test]
    fn mean_preserving_variance_monte_carlo() {
        let n = 1_000_000;
        let clean = Tensor::full(&[n], 0.5);
        let p = NoiseParams::new(0.01, 0.0002).unwrap();
        let y = synthesize_unclipped(&clean, p, SynthesisMode::MeanPreserving, 11).unwrap();
        let (m, v) = var_of(&y);
        let expected = 0.005 + 4e-8;
        assert!((v / expected - 1.0).abs() < 0.02, "variance {v}");
        assert!((m - 0.5).abs() < 3.0 * (expected / n as f64).sqrt());
    }

    #[test]
    fn literal_unit_gain_variance() {
        let n = 1_000_000;
        let clean = Tensor::full(&[n], 0.5);
        let p = NoiseParams::new(1.0, 0.0).unwrap();
        let y = synthesize_unclipped(&clean, p, SynthesisMode::Literal, 5).unwrap();
        let (m, v) = var_of(&y);
        // Var of the sample variance for Poisson(mu): (mu + 2 mu^2) / n
        assert!((v - 0.5).abs() < 3.0 * ((0.5 + 0.5) / n as f64).sqrt());
        assert!((m - 0.5).abs() < 3.0 * (0.5 / n as f64).sqrt());
    }

    #[test]
    fn clipped_output_in_unit_range() {
        let clean = Tensor::from_fn(&[1, 1, 32, 32], |i| (i % 32) as f64 / 31.0);
        let p = NoiseParams::new(0.05, 0.06).unwrap();
        let y = synthesize(&clean, p, SynthesisMode::MeanPreserving, 9).unwrap();
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let y2 = synthesize(&clean, p, SynthesisMode::MeanPreserving, 9).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn mixture_sampling() {
        let r = MixtureRanges::default();
        assert_eq!(r.alpha.1, 0.0256);
        let draws = sample_mixture(r, 500, 1).unwrap();
        assert!(draws
            .iter()
            .all(|p| p.alpha >= 1e-6 && p.alpha <= 0.0256 && p.sigma >= 0.0 && p.sigma <= 0.06));
        assert!(sample_mixture(r, 0, 1).unwrap().is_empty());
        assert_eq!(sample_mixture(r, 10, 4).unwrap(), sample_mixture(r, 10, 4).unwrap());
        let bad = MixtureRanges {
            alpha: (0.1, 0.1),
            ..r
        };
        assert!(sample_mixture(bad, 3, 1).is_err());
    }
}
