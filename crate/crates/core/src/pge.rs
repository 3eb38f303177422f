//! Noise-parameter estimator network and its self-supervised training.
//!
//! A small U-Net maps a noisy image to `(alpha, sigma)`. It is trained so that
//! the generalized Anscombe transform with the estimated parameters leaves
//! residual noise of unit variance, as measured by [`var_est`](crate::var_est).

use rand::seq::SliceRandom;

use crate::autograd::{ConvGeom, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Prelu};
use crate::noise::NoiseParams;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, stage};
use crate::tensor::Tensor;
use crate::var_est::{self, EstimatorConfig};
use crate::vst;

pub const ALPHA_MIN: f64 = 1e-4;
pub const SIGMA_MIN: f64 = 1e-6;
const INIT_ALPHA: f64 = 0.05;
const INIT_SIGMA: f64 = 0.01;
/// `softplus(u)` below this counts as sitting on the alpha floor.
const FLOOR_SLACK: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgeConfig {
    pub channels: [usize; 3],
    pub estimator: EstimatorConfig,
}

impl Default for PgeConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            estimator: EstimatorConfig::default(),
        }
    }
}

fn inverse_softplus(v: f64) -> f64 {
    v.exp_m1().ln()
}

struct Block {
    conv: Conv,
    act: Prelu,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut rng::StreamRng) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, name, cin, cout, 3, ConvGeom::same(3, 1), true, 1.0, rng)?,
            act: Prelu::new(store, name, cout)?,
        })
    }

    fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        self.act.forward(self.conv.forward(x, p)?, p)
    }
}

/// Three-scale U-Net with a global-average-pooled two-channel head.
pub struct PgeNet {
    config: PgeConfig,
    store: ParamStore,
    /// enc0 x2, enc1 x2, bottleneck x2, dec1 x2, dec0 x2
    blocks: Vec<Block>,
    head: Conv,
}

/// Estimated parameters of one image as differentiable scalars.
pub struct EstimateVars<'t> {
    pub alpha: Var<'t>,
    pub sigma: Var<'t>,
    pub alpha_at_floor: bool,
}

impl PgeNet {
    pub fn new(config: PgeConfig, seed: u64) -> Result<Self> {
        config.estimator.validate()?;
        let [c0, c1, c2] = config.channels;
        if config.channels.contains(&0) {
            return Err(Error::InvalidParameter("zero channel width".into()));
        }
        let mut rng = rng::stage_stream(seed, stage::PGE_INIT);
        let mut store = ParamStore::new();
        let plan = [
            ("enc0.0", 1, c0),
            ("enc0.1", c0, c0),
            ("enc1.0", c0, c1),
            ("enc1.1", c1, c1),
            ("mid.0", c1, c2),
            ("mid.1", c2, c2),
            ("dec1.0", c2 + c1, c1),
            ("dec1.1", c1, c1),
            ("dec0.0", c1 + c0, c0),
            ("dec0.1", c0, c0),
        ];
        let blocks = plan
            .iter()
            .map(|&(name, cin, cout)| Block::new(&mut store, name, cin, cout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::pointwise(&mut store, "head", c0, 2, 0.1, &mut rng)?;
        let bias = head.b.expect("pointwise conv has a bias");
        store.get_mut(bias).value = Tensor::new(
            &[2],
            vec![
                inverse_softplus(INIT_ALPHA - ALPHA_MIN),
                inverse_softplus(INIT_SIGMA - SIGMA_MIN),
            ],
        )?;
        Ok(Self {
            config,
            store,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &PgeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    fn check_input(y: &Tensor) -> Result<()> {
        let (_, c, h, w) = y.dims4()?;
        if c != 1 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "pge_forward",
                reason: format!("need single-channel input with sides divisible by 4, got {:?}", y.shape()),
            });
        }
        Ok(())
    }

    /// Raw head output `(N, 2, 1, 1)` before the positive mapping.
    pub fn logits<'t>(&self, y: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        Self::check_input(&y.value())?;
        let b = &self.blocks;
        let s0 = b[1].forward(b[0].forward(y, p)?, p)?;
        let s1 = b[3].forward(b[2].forward(s0.avg_pool2d()?, p)?, p)?;
        let m = b[5].forward(b[4].forward(s1.avg_pool2d()?, p)?, p)?;
        let u1 = Var::concat(&[m.upsample2x()?, s1])?;
        let d1 = b[7].forward(b[6].forward(u1, p)?, p)?;
        let u0 = Var::concat(&[d1.upsample2x()?, s0])?;
        let d0 = b[9].forward(b[8].forward(u0, p)?, p)?;
        self.head.forward(d0, p)?.global_avg_pool()
    }

    /// Differentiable `(alpha, sigma)` for every image of the batch `y`.
    pub fn forward<'t>(&self, y: Var<'t>, p: &Bound<'t>) -> Result<Vec<EstimateVars<'t>>> {
        let logits = self.logits(y, p)?;
        let n = logits.shape()[0];
        (0..n)
            .map(|j| {
                let item = logits.batch_item(j)?;
                let sp_a = item.channel(0)?.softplus()?;
                let sp_s = item.channel(1)?.softplus()?;
                Ok(EstimateVars {
                    alpha_at_floor: sp_a.item() < FLOOR_SLACK,
                    alpha: sp_a.offset(ALPHA_MIN)?,
                    sigma: sp_s.offset(SIGMA_MIN)?,
                })
            })
            .collect()
    }

    /// Estimates for a batch `(N, 1, H, W)`.
    pub fn estimate(&self, y: &Tensor) -> Result<Vec<NoiseParams>> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.store);
        self.forward(tape.constant(y.clone()), &p)?
            .iter()
            .map(|e| NoiseParams::new(e.alpha.item(), e.sigma.item()))
            .collect()
    }

    pub fn estimate_one(&self, y: &Tensor) -> Result<NoiseParams> {
        Ok(self.estimate(y)?[0])
    }
}

/// Loss value and per-image diagnostics of one batch.
pub struct PgeLoss<'t> {
    pub loss: Var<'t>,
    pub etas: Vec<f64>,
    pub estimates: Vec<(f64, f64)>,
    pub floor_hits: usize,
}

/// `sum_j (eta(GAT_{alpha_j, sigma_j}(Y_j)) - 1)^2` over the batch.
pub fn pge_loss<'t>(net: &PgeNet, tape: &'t Tape, batch: &[Tensor], p: &Bound<'t>) -> Result<PgeLoss<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let y = tape.constant(Tensor::stack(batch)?);
    let est = net.forward(y, p)?;
    let mut terms = Vec::with_capacity(batch.len());
    let mut etas = Vec::with_capacity(batch.len());
    let mut estimates = Vec::with_capacity(batch.len());
    let mut floor_hits = 0;
    for (j, e) in est.iter().enumerate() {
        if e.alpha_at_floor {
            floor_hits += 1;
            log::warn!("alpha estimate at its floor {ALPHA_MIN}; gradient through alpha vanishes");
        }
        let g = vst::gat_var(y.batch_item(j)?, e.alpha, e.sigma)?;
        let (eta, _) = var_est::eta_var(g, &net.config.estimator)?;
        etas.push(eta.item());
        estimates.push((e.alpha.item(), e.sigma.item()));
        terms.push(eta.offset(-1.0)?.square()?);
    }
    let mut loss = terms[0];
    for t in &terms[1..] {
        loss = loss.add(t)?;
    }
    Ok(PgeLoss {
        loss,
        etas,
        estimates,
        floor_hits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PgeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PgeHistory {
    /// Mean per-image loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub floor_warnings: usize,
}

/// Train in place on noisy patches `(1, 1, H, W)`.
pub fn train_pge(net: &mut PgeNet, data: &[Tensor], cfg: &PgeTrainConfig) -> Result<PgeHistory> {
    train_pge_with(net, data, cfg, |_, _| {})
}

/// As [`train_pge`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_pge_with(
    net: &mut PgeNet,
    data: &[Tensor],
    cfg: &PgeTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PgeHistory> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size 0".into()));
    }
    let mut opt = Adam::new(cfg.adam, &net.store)?;
    let mut rng = rng::stage_stream(cfg.seed, stage::PGE_SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = PgeHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| data[i].clone()).collect();
            let tape = Tape::new();
            let p = Bound::params(&tape, &net.store);
            let out = pge_loss(net, &tape, &batch, &p).map_err(|e| diverged(step, e))?;
            history.floor_warnings += out.floor_hits;
            let value = out.loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("loss {value}"),
                });
            }
            total += value;
            let grads = tape.backward(out.loss).map_err(|e| diverged(step, e))?;
            net.store.accumulate(&grads);
            opt.step(&mut net.store).map_err(|e| diverged(step, e))?;
            step += 1;
        }
        let mean = total / data.len() as f64;
        log::info!("pge epoch {epoch}: loss {mean:.6}");
        history.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(history)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Residual noise variance after transforming each image with its own
/// estimated parameters.
pub fn stabilized_variances(net: &PgeNet, images: &[Tensor]) -> Result<Vec<f64>> {
    images
        .iter()
        .map(|y| {
            let p = net.estimate_one(y)?;
            var_est::eta(&vst::gat(y, p)?, &net.config.estimator)
        })
        .collect()
}

/// Grid sweep of `eta(GAT_{a,s}(patch))`.
#[derive(Clone, Debug)]
pub struct Locus {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Row-major over `(alpha, sigma)`.
    pub eta: Vec<f64>,
    pub tol: f64,
}

impl Locus {
    pub fn eta_at(&self, ia: usize, is: usize) -> f64 {
        self.eta[ia * self.sigmas.len() + is]
    }

    /// Grid pairs with `|eta - 1| <= tol`.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (ia, &a) in self.alphas.iter().enumerate() {
            for (is, &s) in self.sigmas.iter().enumerate() {
                if (self.eta_at(ia, is) - 1.0).abs() <= self.tol {
                    out.push((a, s));
                }
            }
        }
        out
    }

    /// Whether some locus point lies within `cells` grid steps of the grid
    /// node nearest to `(alpha, sigma)`.
    pub fn passes_near(&self, alpha: f64, sigma: f64, cells: usize) -> bool {
        let nearest = |grid: &[f64], v: f64| {
            (0..grid.len())
                .min_by(|&i, &j| (grid[i] - v).abs().total_cmp(&(grid[j] - v).abs()))
                .unwrap_or(0)
        };
        let (ca, cs) = (nearest(&self.alphas, alpha), nearest(&self.sigmas, sigma));
        let a_range = ca.saturating_sub(cells)..=(ca + cells).min(self.alphas.len() - 1);
        a_range.into_iter().any(|ia| {
            let s_range = cs.saturating_sub(cells)..=(cs + cells).min(self.sigmas.len() - 1);
            s_range
                .into_iter()
                .any(|is| (self.eta_at(ia, is) - 1.0).abs() <= self.tol)
        })
    }
}

pub fn stabilization_locus(
    patch: &Tensor,
    alphas: &[f64],
    sigmas: &[f64],
    tol: f64,
    estimator: &EstimatorConfig,
) -> Result<Locus> {
    if alphas.is_empty() || sigmas.is_empty() {
        return Err(Error::InvalidParameter("empty locus grid".into()));
    }
    let mut eta = Vec::with_capacity(alphas.len() * sigmas.len());
    for &a in alphas {
        for &s in sigmas {
            let g = vst::gat(patch, NoiseParams::new(a, s)?)?;
            eta.push(var_est::eta(&g, estimator)?);
        }
    }
    Ok(Locus {
        alphas: alphas.to_vec(),
        sigmas: sigmas.to_vec(),
        eta,
        tol,
    })
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::noise::{self, SynthesisMode};

    fn tiny() -> PgeNet {
        let cfg = PgeConfig {
            channels: [2, 2, 2],
            estimator: EstimatorConfig {
                patch_size: 4,
                stride: 2,
                tol_rel: 1e-3,
            },
        };
        PgeNet::new(cfg, 3).unwrap()
    }

    fn noisy(seed: u64, size: usize) -> Tensor {
        let clean = Tensor::from_fn(&[1, 1, size, size], |i| 0.3 + 0.4 * ((i % size) as f64 / size as f64));
        noise::synthesize(&clean, NoiseParams::new(0.1, 0.02).unwrap(), SynthesisMode::MeanPreserving, seed).unwrap()
    }

    #[test]
    fn initial_estimates_near_midrange() {
        let net = PgeNet::new(PgeConfig::default(), 1).unwrap();
        let p = net.estimate_one(&noisy(1, 32)).unwrap();
        assert!((p.alpha / 0.05 - 1.0).abs() < 0.2, "{p:?}");
        assert!((p.sigma / 0.01 - 1.0).abs() < 0.3, "{p:?}");
        assert_eq!(p, net.estimate_one(&noisy(1, 32)).unwrap());
    }

    #[test]
    fn rejects_bad_sides() {
        let net = tiny();
        assert!(net.estimate(&Tensor::zeros(&[1, 1, 18, 16])).is_err());
        assert!(net.estimate(&Tensor::zeros(&[1, 2, 16, 16])).is_err());
    }

    #[test]
    fn loss_matches_definition_and_batch_order() {
        let net = tiny();
        let batch = [noisy(1, 16), noisy(2, 16)];
        let tape = Tape::new();
        let p = Bound::frozen(&tape, net.params());
        let out = pge_loss(&net, &tape, &batch, &p).unwrap();
        let want: f64 = out.etas.iter().map(|e| (e - 1.0).powi(2)).sum();
        assert!((out.loss.item() - want).abs() < 1e-12);
        let swapped = [batch[1].clone(), batch[0].clone()];
        let out2 = pge_loss(&net, &tape, &swapped, &p).unwrap();
        assert!((out.loss.item() - out2.loss.item()).abs() < 1e-12);
        assert!(pge_loss(&net, &tape, &[], &p).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = tiny();
        let batch = [noisy(4, 16)];
        let inputs: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
        let reports = gradcheck(&inputs, 1e-5, |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(pge_loss(&net, tape, &batch, &p)?.loss)
        })
        .unwrap();
        for (r, p) in reports.iter().zip(net.params().iter()) {
            assert!(r.passes(1e-3), "{}: {r:?}", p.name);
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let data: Vec<Tensor> = (0..4).map(|s| noisy(s, 16)).collect();
        let cfg = PgeTrainConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let mut a = tiny();
        let mut b = tiny();
        let ha = train_pge(&mut a, &data, &cfg).unwrap();
        let hb = train_pge(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha.epoch_loss, hb.epoch_loss);
        assert!(train_pge(&mut a, &[], &cfg).is_err());
    }

    #[test]
    fn zero_tolerance_locus_is_empty() {
        let y = noisy(5, 32);
        let cfg = EstimatorConfig::default();
        let l = stabilization_locus(&y, &linspace(0.05, 0.15, 5), &linspace(0.0, 0.04, 3), 0.0, &cfg).unwrap();
        assert!(l.points().is_empty());
        let l = stabilization_locus(&y, &linspace(0.05, 0.15, 11), &linspace(0.0, 0.04, 3), 0.1, &cfg).unwrap();
        for (a, s) in l.points() {
            let g = vst::gat(&y, NoiseParams::new(a, s).unwrap()).unwrap();
            assert!((var_est::eta(&g, &cfg).unwrap() - 1.0).abs() <= 0.1);
        }
        assert!(stabilization_locus(&y, &[], &[0.1], 0.1, &cfg).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn output_floors_hold(seed in 0u64..1000, scale in -50.0f64..50.0) {
            let net = tiny();
            let mut r = rng::stream(seed);
            let y = Tensor::from_fn(&[1, 1, 16, 16], |_| scale * rng::normal(&mut r));
            let p = net.estimate_one(&y).unwrap();
            proptest::prop_assert!(p.alpha >= ALPHA_MIN && p.sigma >= SIGMA_MIN);
        }
    }
}
