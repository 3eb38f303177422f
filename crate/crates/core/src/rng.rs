//! Seeded random streams and samplers.
//!
//! Every stochastic stage draws from its own ChaCha8 stream. A stage seed is
//! `splitmix64(global_seed ^ splitmix64(stage))`, where `stage` is one of
//! the constants in [`stage`] plus a per-item counter where needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub mod stage {
    pub const SYNTH: u64 = 0x100;
    pub const CORPUS: u64 = 0x200;
    pub const PGE_INIT: u64 = 0x300;
    pub const PGE_SHUFFLE: u64 = 0x400;
    pub const BSN_INIT: u64 = 0x500;
    pub const DENOISER_SHUFFLE: u64 = 0x600;
    pub const MIXTURE: u64 = 0x700;
    pub const CHECK: u64 = 0x800;
    pub const PATCHES: u64 = 0x900;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stage_seed(global: u64, stage: u64) -> u64 {
    splitmix64(global ^ splitmix64(stage))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_stream(global: u64, stage: u64) -> StreamRng {
    stream(stage_seed(global, stage))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Poisson variate: inversion below mean 10, PTRS transformed rejection
/// (Hörmann 1993) above.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 10.0 {
        poisson_inversion(rng, mean)
    } else {
        poisson_ptrs(rng, mean)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        // rounding can stall the cdf just below u
        if p < 1e-300 {
            break;
        }
    }
    k
}

fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * loglam - statrs::function::gamma::ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(mean: f64, n: usize) -> (f64, f64) {
        let mut rng = stream(7);
        let xs: Vec<f64> = (0..n).map(|_| poisson(&mut rng, mean) as f64).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, v)
    }

    #[test]
    fn poisson_moments_both_regimes() {
        let n = 200_000;
        for mean in [0.3, 4.0, 9.5, 10.0, 37.0, 400.0] {
            let (m, v) = moments(mean, n);
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 4.0 * se, "mean {mean}: {m}");
            // Var of the sample variance is about (mu4 - sigma^4)/n = (mean + 2 mean^2)/n
            let se_v = ((mean + 2.0 * mean * mean) / n as f64).sqrt();
            assert!((v - mean).abs() < 4.0 * se_v, "var {mean}: {v}");
        }
    }

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = (0..5).map(|_| 0).scan(stage_stream(1, stage::SYNTH), |r, _| Some(poisson(r, 20.0))).collect();
        let b: Vec<u64> = (0..5).map(|_| 0).scan(stage_stream(1, stage::SYNTH), |r, _| Some(poisson(r, 20.0))).collect();
        assert_eq!(a, b);
        assert_ne!(stage_seed(1, stage::SYNTH), stage_seed(1, stage::CORPUS));
    }
}
