//! Full-reference image quality: PSNR and SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_STD: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(pred: &Tensor, clean: &Tensor) -> Result<f64> {
    same_shape(pred, clean, "mse")?;
    let s: f64 = pred.data().iter().zip(clean.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_with_peak(pred: &Tensor, clean: &Tensor, peak: f64) -> Result<f64> {
    let e = mse(pred, clean)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP))
}

pub fn psnr(pred: &Tensor, clean: &Tensor) -> Result<f64> {
    psnr_with_peak(pred, clean, 1.0)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_STD * SSIM_STD)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity over all fully contained 11x11 windows, unit
/// dynamic range. Multi-plane tensors average over planes.
pub fn ssim(pred: &Tensor, clean: &Tensor) -> Result<f64> {
    same_shape(pred, clean, "ssim")?;
    let (n, c, h, w) = pred.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            reason: format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // separable filtering: rows then columns
    let filter = |img: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * wo];
        for y in 0..h {
            for x in 0..wo {
                rows[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
            }
        }
        let mut out = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                out[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * wo + x]).sum();
            }
        }
        out
    };
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let a = &pred.data()[p * plane..(p + 1) * plane];
        let b = &clean.data()[p * plane..(p + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter(a);
        let mu_b = filter(b);
        let aa = filter(&prod(|x, _| x * x));
        let bb = filter(&prod(|_, y| y * y));
        let ab = filter(&prod(|x, y| x * y));
        let mut s = 0.0;
        for i in 0..ho * wo {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / (ho * wo) as f64;
    }
    Ok(total / (n * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn img(seed: u64) -> Tensor {
        let mut r = rng::stream(seed);
        Tensor::from_fn(&[1, 1, 24, 20], |_| 0.5 + 0.2 * rng::normal(&mut r))
    }

    #[test]
    fn psnr_examples() {
        let a = img(1);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let shifted = Tensor::full(&[1, 1, 4, 4], 0.6);
        let base = Tensor::full(&[1, 1, 4, 4], 0.5);
        assert!((psnr(&shifted, &base).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &base).is_err());
    }

    #[test]
    fn ssim_properties() {
        let (a, b) = (img(1), img(2));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-15);
        assert!((-1.0..0.5).contains(&ab));
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(ssim(&Tensor::zeros(&[1, 1, 8, 8]), &Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let (a, b) = (img(3), img(4));
        let g = gaussian_window();
        let (h, w) = (24, 20);
        let mut s = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g[i] * g[j];
                        let (p, q) = (a.at4(0, 0, y + i, x + j), b.at4(0, 0, y + i, x + j));
                        ma += wgt * p;
                        mb += wgt * q;
                        aa += wgt * p * p;
                        bb += wgt * q * q;
                        ab += wgt * p * q;
                    }
                }
                let (va, vb, cv) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                s += ((2.0 * ma * mb + 1e-4) * (2.0 * cv + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - s / count as f64).abs() < 1e-12);
    }
}
