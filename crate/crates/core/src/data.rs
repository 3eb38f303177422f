//! Procedural clean images and patch sampling for desk-scale experiments.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::noise::{self, NoiseParams, SynthesisMode};
use crate::rng::{self, stage};
use crate::tensor::Tensor;

/// Intensity range and structure of generated images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageStyle {
    pub lo: f64,
    pub hi: f64,
    /// Sinusoid components; periods are at least `min_period` pixels.
    pub waves: usize,
    pub min_period: f64,
    pub blobs: usize,
    pub edges: usize,
}

impl Default for ImageStyle {
    fn default() -> Self {
        Self {
            lo: 0.1,
            hi: 0.9,
            waves: 4,
            min_period: 12.0,
            blobs: 4,
            edges: 2,
        }
    }
}

/// One smooth textured image `(1, 1, h, w)` with values spanning `[lo, hi]`.
pub fn textured_image<R: Rng + ?Sized>(h: usize, w: usize, style: &ImageStyle, rng: &mut R) -> Result<Tensor> {
    if h == 0 || w == 0 || !(style.lo < style.hi) || style.lo < 0.0 || style.hi > 1.0 {
        return Err(Error::InvalidParameter(format!("bad image request {h}x{w} {style:?}")));
    }
    let size = h.max(w) as f64;
    let max_freq = 1.0 / style.min_period;
    let waves: Vec<[f64; 4]> = (0..style.waves)
        .map(|_| {
            let f = rng.random_range(1.0 / size..max_freq);
            let theta = rng.random_range(0.0..PI);
            [
                f * theta.cos(),
                f * theta.sin(),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.3..1.0),
            ]
        })
        .collect();
    let blobs: Vec<[f64; 4]> = (0..style.blobs)
        .map(|_| {
            [
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(size / 16.0..size / 4.0),
                rng.random_range(-1.5..1.5),
            ]
        })
        .collect();
    let edges: Vec<[f64; 4]> = (0..style.edges)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            [
                theta.cos(),
                theta.sin(),
                rng.random_range(0.25..0.75) * size,
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let tilt = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];

    let mut img = Tensor::from_fn(&[1, 1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut v = tilt[0] * y / size + tilt[1] * x / size;
        for [fy, fx, phase, amp] in &waves {
            v += amp * (2.0 * PI * (fy * y + fx * x) + phase).sin();
        }
        for [cy, cx, s, amp] in &blobs {
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            v += amp * (-0.5 * d2 / (s * s)).exp();
        }
        for [ny, nx, off, amp] in &edges {
            // soft step, a couple of pixels wide
            let d = ny * y + nx * x - off;
            v += amp / (1.0 + (-d / 1.5).exp());
        }
        v
    });
    let (mn, mx) = (img.min(), img.max());
    let span = (mx - mn).max(1e-12);
    for v in img.data_mut() {
        *v = style.lo + (style.hi - style.lo) * (*v - mn) / span;
    }
    Ok(img)
}

/// `count` clean images from the corpus stream of `seed`.
pub fn clean_corpus(count: usize, h: usize, w: usize, style: &ImageStyle, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = rng::stage_stream(seed, stage::CORPUS);
    (0..count).map(|_| textured_image(h, w, style, &mut rng)).collect()
}

/// Noisy copy of every image; image `i` uses its own synthesis seed.
pub fn add_noise(clean: &[Tensor], p: NoiseParams, mode: SynthesisMode, seed: u64) -> Result<Vec<Tensor>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, x)| noise::synthesize(x, p, mode, rng::stage_seed(seed, i as u64)))
        .collect()
}

/// Random `size x size` crops drawn uniformly over images and positions.
pub fn random_patches(images: &[Tensor], count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng::stage_stream(seed, stage::PATCHES);
    (0..count)
        .map(|_| {
            let img = &images[rng.random_range(0..images.len())];
            let (_, _, h, w) = img.dims4()?;
            if h < size || w < size {
                return Err(Error::InvalidShape {
                    op: "random_patches",
                    reason: format!("{h}x{w} image smaller than patch {size}"),
                });
            }
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            img.crop(top, left, size, size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_and_determinism() {
        let style = ImageStyle::default();
        let a = clean_corpus(3, 40, 50, &style, 7).unwrap();
        let b = clean_corpus(3, 40, 50, &style, 7).unwrap();
        assert_eq!(a, b);
        for img in &a {
            assert_eq!(img.shape(), &[1, 1, 40, 50]);
            assert!((img.min() - 0.1).abs() < 1e-12 && (img.max() - 0.9).abs() < 1e-12);
        }
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn patches_are_crops() {
        let imgs = clean_corpus(2, 32, 32, &ImageStyle::default(), 1).unwrap();
        let ps = random_patches(&imgs, 5, 16, 2).unwrap();
        assert!(ps.iter().all(|p| p.shape() == [1, 1, 16, 16]));
        assert!(random_patches(&imgs, 1, 40, 2).is_err());
        assert!(random_patches(&[], 1, 4, 2).is_err());
    }
}
