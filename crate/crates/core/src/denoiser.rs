//! Pixelwise affine denoising in the stabilized domain.
//!
//! The blind-spot network predicts `(a1, a0)` per pixel and the estimate is
//! `a1 * Z + a0`. Because the coefficients never see `Z_i`, the loss
//! `|Z - f|^2 / n + sigma^2 / n * sum(2 a1 - 1)` is an unbiased estimate of
//! the error against the clean stabilized image, so training needs no clean
//! targets.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::bsn::{self, BlindSpotNet};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::noise::{NoiseParams, SynthesisMode};
use crate::optim::{Adam, AdamConfig};
use crate::pge::PgeNet;
use crate::rng::{self, stage};
use crate::tensor::Tensor;
use crate::vst::{self, NormalizationInfo};

/// Per-pixel affine coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    pub a1: Tensor,
    pub a0: Tensor,
}

impl AffineField {
    pub fn new(a1: Tensor, a0: Tensor) -> Result<Self> {
        if a1.shape() != a0.shape() {
            return Err(Error::ShapeMismatch {
                op: "affine_field",
                lhs: a1.shape().to_vec(),
                rhs: a0.shape().to_vec(),
            });
        }
        for &v in a1.data() {
            if !(0.0..=bsn::SLOPE_MAX).contains(&v) {
                return Err(Error::OutOfRange {
                    what: "slope",
                    value: v,
                    lo: 0.0,
                    hi: bsn::SLOPE_MAX,
                });
            }
        }
        for &v in a0.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what: "intercept",
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        Ok(Self { a1, a0 })
    }
}

/// `f = a1 * z + a0`.
pub fn affine_apply(z: &Tensor, field: &AffineField) -> Result<Tensor> {
    if z.shape() != field.a1.shape() {
        return Err(Error::ShapeMismatch {
            op: "affine_apply",
            lhs: z.shape().to_vec(),
            rhs: field.a1.shape().to_vec(),
        });
    }
    let f = z.zip_map(&field.a1, |z, a| a * z)?;
    f.zip_map(&field.a0, |f, b| f + b)
}

pub fn affine_apply_var<'t>(z: Var<'t>, a1: Var<'t>, a0: Var<'t>) -> Result<Var<'t>> {
    if z.shape() != a1.shape() || z.shape() != a0.shape() {
        return Err(Error::ShapeMismatch {
            op: "affine_apply",
            lhs: z.shape(),
            rhs: a1.shape(),
        });
    }
    z.mul(&a1)?.add(&a0)
}

/// `|z - f|^2 / n + sigma2 / n * sum(2 a1 - 1)`.
pub fn estimated_loss<'t>(z: Var<'t>, f: Var<'t>, a1: Var<'t>, sigma2: f64) -> Result<Var<'t>> {
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance {sigma2} < 0")));
    }
    let fit = z.sub(&f)?.square()?.reduce_mean()?;
    let penalty = a1.scale(2.0)?.offset(-1.0)?.reduce_mean()?.scale(sigma2)?;
    fit.add(&penalty)
}

/// Plain-value form of [`estimated_loss`].
pub fn estimated_loss_value(z: &Tensor, f: &Tensor, a1: &Tensor, sigma2: f64) -> Result<f64> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    Ok(estimated_loss(c(z), c(f), c(a1), sigma2)?.item())
}

/// One image of a training batch.
pub struct LossTerm<'t> {
    pub z: Var<'t>,
    pub f: Var<'t>,
    pub a1: Var<'t>,
    /// Normalization range of the full image the crop came from.
    pub beta: Option<f64>,
}

/// Mean over images of [`estimated_loss`] with noise variance `beta^-2`.
pub fn dataset_loss<'t>(terms: &[LossTerm<'t>]) -> Result<Var<'t>> {
    if terms.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total: Option<Var<'t>> = None;
    for t in terms {
        let beta = t
            .beta
            .filter(|b| *b > 0.0)
            .ok_or_else(|| Error::InvalidParameter("missing normalization range".into()))?;
        let l = estimated_loss(t.z, t.f, t.a1, 1.0 / (beta * beta))?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    total.expect("non-empty").scale(1.0 / terms.len() as f64)
}

/// Where the noise parameters of an image come from.
#[derive(Clone, Copy)]
pub enum ParamSource<'a> {
    Fixed(NoiseParams),
    Estimator(&'a PgeNet),
}

impl ParamSource<'_> {
    /// Parameters for `y`; the estimator sees the largest top-left crop with
    /// sides divisible by four.
    pub fn params_for(&self, y: &Tensor) -> Result<NoiseParams> {
        match self {
            Self::Fixed(p) => Ok(*p),
            Self::Estimator(net) => {
                let (_, _, h, w) = y.dims4()?;
                let (h4, w4) = (h / 4 * 4, w / 4 * 4);
                if h4 == h && w4 == w {
                    net.estimate_one(y)
                } else {
                    net.estimate_one(&y.crop(0, 0, h4, w4)?)
                }
            }
        }
    }
}

/// Stabilized and normalized form of one noisy image.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub z: Tensor,
    pub info: NormalizationInfo,
    pub params: NoiseParams,
}

pub fn prepare(y: &Tensor, source: ParamSource<'_>) -> Result<Prepared> {
    let params = source.params_for(y)?;
    let (z, info) = vst::normalize(&vst::gat(y, params)?)?;
    Ok(Prepared { z, info, params })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the random training crops; whole images if larger.
    pub patch_size: usize,
    /// Crops drawn from every image per epoch.
    pub crops_per_image: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            patch_size: 64,
            crops_per_image: 1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DenoiserHistory {
    pub epoch_loss: Vec<f64>,
}

pub fn train_denoiser(
    net: &mut BlindSpotNet,
    noisy: &[Tensor],
    source: ParamSource<'_>,
    cfg: &DenoiserTrainConfig,
) -> Result<DenoiserHistory> {
    let prepared = noisy.iter().map(|y| prepare(y, source)).collect::<Result<Vec<_>>>()?;
    train_prepared(net, &prepared, cfg, |_, _| {})
}

/// Train on already stabilized images, calling `on_epoch(epoch, loss)`.
pub fn train_prepared(
    net: &mut BlindSpotNet,
    data: &[Prepared],
    cfg: &DenoiserTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<DenoiserHistory> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.crops_per_image == 0 || cfg.patch_size == 0 {
        return Err(Error::InvalidParameter(format!("invalid training config {cfg:?}")));
    }
    // cannot fail for a built net; kept as a guard on the training entry
    bsn::check_blind_spot(net.displacement())?;
    let mut opt = Adam::new(cfg.adam, net.params())?;
    let mut rng = rng::stage_stream(cfg.seed, stage::DENOISER_SHUFFLE);
    let mut history = DenoiserHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut crops = Vec::with_capacity(data.len() * cfg.crops_per_image);
        for (i, item) in data.iter().enumerate() {
            let (_, _, h, w) = item.z.dims4()?;
            let (ph, pw) = (cfg.patch_size.min(h), cfg.patch_size.min(w));
            for _ in 0..cfg.crops_per_image {
                let top = rng.random_range(0..=h - ph);
                let left = rng.random_range(0..=w - pw);
                crops.push((i, item.z.crop(top, left, ph, pw)?));
            }
        }
        for k in (1..crops.len()).rev() {
            crops.swap(k, rng.random_range(0..=k));
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in crops.chunks(cfg.batch_size) {
            let value = train_step(net, &mut opt, data, chunk).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    msg: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("loss {value}"),
                });
            }
            total += value;
            batches += 1;
            step += 1;
        }
        let mean = total / batches as f64;
        log::info!("denoiser epoch {epoch}: loss {mean:.6}");
        history.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(history)
}

fn train_step(net: &mut BlindSpotNet, opt: &mut Adam, data: &[Prepared], chunk: &[(usize, Tensor)]) -> Result<f64> {
    let same_shape = chunk.iter().all(|(_, c)| c.shape() == chunk[0].1.shape());
    let tape = Tape::new();
    let p = Bound::params(&tape, net.params());
    let mut terms = Vec::with_capacity(chunk.len());
    if same_shape {
        let parts: Vec<Tensor> = chunk.iter().map(|(_, c)| c.clone()).collect();
        let z = tape.constant(Tensor::stack(&parts)?);
        let out = net.forward(z, &p)?;
        for (j, (i, _)) in chunk.iter().enumerate() {
            let zj = z.batch_item(j)?;
            let a1 = out.a1.batch_item(j)?;
            let f = affine_apply_var(zj, a1, out.a0.batch_item(j)?)?;
            terms.push(LossTerm {
                z: zj,
                f,
                a1,
                beta: Some(data[*i].info.beta),
            });
        }
    } else {
        for (i, c) in chunk {
            let z = tape.constant(c.clone());
            let out = net.forward(z, &p)?;
            let f = affine_apply_var(z, out.a1, out.a0)?;
            terms.push(LossTerm {
                z,
                f,
                a1: out.a1,
                beta: Some(data[*i].info.beta),
            });
        }
    }
    let loss = dataset_loss(&terms)?;
    let value = loss.item();
    let grads = tape.backward(loss)?;
    net.params_mut().accumulate(&grads);
    opt.step(net.params_mut())?;
    Ok(value)
}

/// Map the denoised stabilized image back to intensities.
pub fn reconstruct(f: &Tensor, info: NormalizationInfo, params: NoiseParams, mode: SynthesisMode) -> Result<Tensor> {
    vst::iat_guarded(&vst::denormalize(f, info), params, mode)
}

/// Result of [`denoise`].
#[derive(Clone, Debug)]
pub struct Denoised {
    pub image: Tensor,
    pub params: NoiseParams,
    pub field: AffineField,
    pub elapsed: Duration,
}

/// Estimate or take the noise parameters, stabilize, apply the predicted
/// affine field and invert the transform. Output is clipped to `[0, 1]`.
pub fn denoise(y: &Tensor, source: ParamSource<'_>, net: &BlindSpotNet, mode: SynthesisMode) -> Result<Denoised> {
    let start = Instant::now();
    let prep = prepare(y, source)?;
    let (a1, a0) = net.predict(&prep.z)?;
    let field = AffineField::new(a1, a0)?;
    let f = affine_apply(&prep.z, &field)?;
    let image = reconstruct(&f, prep.info, prep.params, mode)?;
    let elapsed = start.elapsed();
    let (_, _, h, w) = y.dims4()?;
    log::info!("denoised {h}x{w} in {:.3} s", elapsed.as_secs_f64());
    Ok(Denoised {
        image,
        params: prep.params,
        field,
        elapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::bsn::NetConfig;
    use crate::noise;

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(&[1, 1, 1, n], v).unwrap()
    }

    #[test]
    fn affine_examples() {
        let z = Tensor::full(&[1, 1, 2, 2], 0.5);
        let f = AffineField::new(Tensor::full(&[1, 1, 2, 2], 0.1), Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!(affine_apply(&z, &f).unwrap().data().iter().all(|&v| (v - 0.05).abs() < 1e-15));
        let f = AffineField::new(Tensor::zeros(&[1, 1, 2, 2]), Tensor::full(&[1, 1, 2, 2], 0.3)).unwrap();
        assert_eq!(affine_apply(&z, &f).unwrap(), Tensor::full(&[1, 1, 2, 2], 0.3));
        assert!(AffineField::new(Tensor::full(&[1], 0.2), Tensor::full(&[1], 0.2)).is_err());
        assert!(affine_apply(&Tensor::zeros(&[1, 1, 3, 3]), &f).is_err());
    }

    #[test]
    fn loss_examples() {
        let z = t(vec![0.2, 0.7, 0.4]);
        // slope 1 outside the net's range, algebra only
        let l = estimated_loss_value(&z, &z, &t(vec![1.0; 3]), 0.04).unwrap();
        assert!((l - 0.04).abs() < 1e-15);
        let c = 0.5;
        let f = t(vec![c; 3]);
        let l = estimated_loss_value(&z, &f, &t(vec![0.0; 3]), 0.04).unwrap();
        let mse = z.data().iter().map(|v| (v - c).powi(2)).sum::<f64>() / 3.0;
        assert!((l - (mse - 0.04)).abs() < 1e-15);
        assert!(estimated_loss_value(&z, &f, &f, -1.0).is_err());
    }

    #[test]
    fn dataset_loss_rules() {
        let tape = Tape::new();
        let c = |v: Vec<f64>| tape.constant(t(v));
        let term = |z: Vec<f64>, f: Vec<f64>, a: Vec<f64>, beta| LossTerm {
            z: c(z),
            f: c(f),
            a1: c(a),
            beta,
        };
        let a = term(vec![0.1, 0.9], vec![0.2, 0.5], vec![0.05, 0.02], Some(2.0));
        let b = term(vec![0.4, 0.3], vec![0.3, 0.3], vec![0.08, 0.0], Some(4.0));
        let single = dataset_loss(&[term(vec![0.1, 0.9], vec![0.2, 0.5], vec![0.05, 0.02], Some(2.0))])
            .unwrap()
            .item();
        let direct = estimated_loss(a.z, a.f, a.a1, 0.25).unwrap().item();
        assert!((single - direct).abs() < 1e-15);
        let ab = dataset_loss(&[
            term(vec![0.1, 0.9], vec![0.2, 0.5], vec![0.05, 0.02], Some(2.0)),
            term(vec![0.4, 0.3], vec![0.3, 0.3], vec![0.08, 0.0], Some(4.0)),
        ])
        .unwrap()
        .item();
        let ba = dataset_loss(&[b, a]).unwrap().item();
        assert!((ab - ba).abs() < 1e-15);
        assert!(dataset_loss(&[term(vec![0.1], vec![0.1], vec![0.0], None)]).is_err());

        // doubling beta quarters the penalty weight
        let pen = |beta: f64| {
            let with = dataset_loss(&[term(vec![0.3], vec![0.3], vec![0.0], Some(beta))]).unwrap().item();
            -with
        };
        assert!((pen(2.0) / pen(4.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_through_affine_and_loss() {
        let z = Tensor::from_fn(&[1, 1, 3, 3], |i| (i as f64 * 0.3).sin() * 0.5 + 0.5);
        let a1 = Tensor::from_fn(&[1, 1, 3, 3], |i| 0.01 * i as f64);
        let a0 = Tensor::from_fn(&[1, 1, 3, 3], |i| 0.1 + 0.05 * i as f64);
        let reports = gradcheck(&[z, a1, a0], 1e-6, |_tape, v| {
            let f = affine_apply_var(v[0], v[1], v[2])?;
            estimated_loss(v[0], f, v[1], 0.03)
        })
        .unwrap();
        assert!(reports.iter().all(|r| r.passes(1e-4)), "{reports:?}");
    }

    #[test]
    fn identity_field_reproduces_inverse_of_transform() {
        let clean = Tensor::from_fn(&[1, 1, 8, 8], |i| 0.3 + 0.005 * i as f64);
        let p = NoiseParams::new(0.05, 0.02).unwrap();
        let y = noise::synthesize(&clean, p, SynthesisMode::MeanPreserving, 1).unwrap();
        let prep = prepare(&y, ParamSource::Fixed(p)).unwrap();
        let x = reconstruct(&prep.z, prep.info, p, SynthesisMode::MeanPreserving).unwrap();
        let direct = vst::iat_guarded(&vst::gat(&y, p).unwrap(), p, SynthesisMode::MeanPreserving).unwrap();
        assert!(x.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn training_runs_deterministically() {
        let cfg = NetConfig::parity_safe("tiny", 4, 1, 1);
        let p = NoiseParams::new(0.05, 0.02).unwrap();
        let clean = Tensor::from_fn(&[1, 1, 16, 16], |i| 0.3 + 0.4 * ((i % 16) as f64 / 16.0));
        let noisy: Vec<Tensor> = (0..3)
            .map(|s| noise::synthesize(&clean, p, SynthesisMode::MeanPreserving, s).unwrap())
            .collect();
        let tc = DenoiserTrainConfig {
            epochs: 3,
            batch_size: 2,
            patch_size: 8,
            ..Default::default()
        };
        let run = || {
            let mut net = BlindSpotNet::build(&cfg, 1).unwrap();
            let h = train_denoiser(&mut net, &noisy, ParamSource::Fixed(p), &tc).unwrap();
            let out = denoise(&noisy[0], ParamSource::Fixed(p), &net, SynthesisMode::MeanPreserving).unwrap();
            (h.epoch_loss, out.image)
        };
        let (h1, x1) = run();
        let (h2, x2) = run();
        assert_eq!(h1, h2);
        assert_eq!(x1, x2);
        assert_eq!(x1.shape(), noisy[0].shape());
        assert!(x1.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pipeline_gradient_on_toy_net() {
        let cfg = NetConfig::sequential("toy", 2, &[
            vec![(0, 1), (1, 0), (-1, -1)],
            vec![(0, 2), (2, 0), (0, 0)],
        ]);
        let mut net = BlindSpotNet::build(&cfg, 5).unwrap();
        // keep pre-activations away from the rectifier kink at exactly zero
        for (k, p) in net.params_mut().iter_mut().enumerate() {
            if p.name.ends_with(".b") {
                p.value = Tensor::from_fn(p.value.shape(), |i| 0.1 + 0.07 * (i + k) as f64);
            }
        }
        let z = Tensor::from_fn(&[1, 1, 6, 6], |i| 0.05 + ((i * 7) % 11) as f64 / 11.0);
        let inputs: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
        let reports = gradcheck(&inputs, 1e-6, |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let zv = tape.constant(z.clone());
            let out = net.forward(zv, &p)?;
            let f = affine_apply_var(zv, out.a1, out.a0)?;
            dataset_loss(&[LossTerm {
                z: zv,
                f,
                a1: out.a1,
                beta: Some(3.0),
            }])
        })
        .unwrap();
        for (r, p) in reports.iter().zip(net.params().iter()) {
            assert!(r.passes(1e-3), "{}: {r:?}", p.name);
        }
    }
}
