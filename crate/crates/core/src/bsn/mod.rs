//! Masked-convolution blind-spot networks.
//!
//! A network is described by a [`NetConfig`]. Construction first computes the
//! exact set of input offsets that reach an output pixel and refuses any
//! configuration whose set contains the centre, so the per-pixel affine
//! coefficients it predicts never see the pixel they are applied to.

mod analyze;
mod spec;

pub use analyze::{check_blind_spot, displacement_set, format_path, DisplacementSet};
pub use spec::{LayerSpec, NetConfig, Offset, Residual, ResidualKind, ResidualTarget, BUILTIN_NAMES};

use rand::Rng;

use crate::autograd::{ConvGeom, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Prelu};
use crate::rng::{self, stage};
use crate::tensor::Tensor;

/// Upper bound of the predicted slope.
pub const SLOPE_MAX: f64 = 0.1;

/// `x + W2 * prelu(W1 * prelu(x))` with 1x1 convolutions.
pub struct ResidualModule {
    act1: Prelu,
    conv1: Conv,
    act2: Prelu,
    conv2: Conv,
}

impl ResidualModule {
    /// The second convolution starts at zero, so the module starts as the
    /// identity.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        let act1 = Prelu::new(store, &format!("{name}.act1"), c)?;
        let conv1 = Conv::pointwise(store, &format!("{name}.conv1"), c, c, 1.0, rng)?;
        let act2 = Prelu::new(store, &format!("{name}.act2"), c)?;
        let conv2 = Conv::pointwise(store, &format!("{name}.conv2"), c, c, 0.0, rng)?;
        Ok(Self {
            act1,
            conv1,
            act2,
            conv2,
        })
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.conv1.cin {
            return Err(Error::ShapeMismatch {
                op: "residual_module",
                lhs: x.shape(),
                rhs: vec![self.conv1.cin],
            });
        }
        let h = self.conv1.forward(self.act1.forward(x, p)?, p)?;
        let h = self.conv2.forward(self.act2.forward(h, p)?, p)?;
        x.add(&h)
    }
}

struct Spatial {
    conv: Conv,
    act: Option<Prelu>,
    rm: Option<ResidualModule>,
}

fn layer_geom(spec: &LayerSpec) -> (usize, ConvGeom) {
    let (d, r) = spec.dilation_and_radius();
    let k = 2 * r + 1;
    let mut mask = vec![false; k * k];
    for &(y, x) in &spec.taps {
        let iy = (y / d as i32 + r as i32) as usize;
        let ix = (x / d as i32 + r as i32) as usize;
        mask[iy * k + ix] = true;
    }
    let mut geom = ConvGeom::same(k, d);
    if mask.iter().any(|&m| !m) {
        geom = geom.with_mask(mask);
    }
    (k, geom)
}

/// Per-pixel affine coefficients: slope in `[0, SLOPE_MAX]`, intercept in
/// `[0, 1]`, each `(N, 1, H, W)`.
pub struct AffineVars<'t> {
    pub a1: Var<'t>,
    pub a0: Var<'t>,
}

/// A built blind-spot network with its parameters.
pub struct BlindSpotNet {
    config: NetConfig,
    store: ParamStore,
    layers: Vec<Spatial>,
    head: Vec<(Conv, Option<Prelu>)>,
    displacement: DisplacementSet,
}

impl BlindSpotNet {
    /// Build `cfg`, rejecting it if the centre reaches the output.
    pub fn build(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let set = displacement_set(cfg)?;
        check_blind_spot(&set)?;
        Self::assemble(cfg, seed, set)
    }

    /// Build without the blind-spot check. Only meant for demonstrating
    /// leaking configurations.
    pub fn build_unchecked(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let set = displacement_set(cfg)?;
        Self::assemble(cfg, seed, set)
    }

    fn assemble(cfg: &NetConfig, seed: u64, displacement: DisplacementSet) -> Result<Self> {
        let mut rng = rng::stage_stream(seed, stage::BSN_INIT);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for (i, spec) in cfg.layers.iter().enumerate() {
            let name = format!("layer{}", i + 1);
            let (k, geom) = layer_geom(spec);
            let conv = Conv::new(
                &mut store,
                &name,
                spec.in_channels,
                spec.out_channels,
                k,
                geom,
                true,
                1.0,
                &mut rng,
            )?;
            let act = spec
                .prelu
                .then(|| Prelu::new(&mut store, &format!("{name}.act"), spec.out_channels))
                .transpose()?;
            let rm = spec
                .residual_module
                .then(|| ResidualModule::new(&mut store, &format!("{name}.rm"), spec.out_channels, &mut rng))
                .transpose()?;
            layers.push(Spatial { conv, act, rm });
        }
        let mut head = Vec::with_capacity(cfg.head.len());
        let mut c = cfg.width();
        for (i, &out) in cfg.head.iter().enumerate() {
            let name = format!("head{}", i + 1);
            let last = i + 1 == cfg.head.len();
            let conv = Conv::pointwise(&mut store, &name, c, out, if last { 0.1 } else { 1.0 }, &mut rng)?;
            let act = (!last)
                .then(|| Prelu::new(&mut store, &format!("{name}.act"), out))
                .transpose()?;
            head.push((conv, act));
            c = out;
        }
        Ok(Self {
            config: cfg.clone(),
            store,
            layers,
            head,
            displacement,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn displacement(&self) -> &DisplacementSet {
        &self.displacement
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable scalars, absent taps excluded.
    pub fn num_params(&self) -> usize {
        self.config.count_parameters()
    }

    /// Head output `(N, 2, H, W)` before the range mapping.
    pub fn logits<'t>(&self, z: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = z.value().dims4()?;
        if c != 1 {
            return Err(Error::InvalidShape {
                op: "bsn_forward",
                reason: format!("expected one channel, got {c}"),
            });
        }
        let mut outputs: Vec<Var<'t>> = Vec::with_capacity(self.layers.len());
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.conv.forward(h, p)?;
            if let Some(act) = &layer.act {
                h = act.forward(h, p)?;
            }
            if let Some(rm) = &layer.rm {
                h = rm.forward(h, p)?;
            }
            for r in &self.config.residuals {
                if r.to == ResidualTarget::Layer(i + 1) {
                    h = h.add(&outputs[r.from - 1])?;
                }
            }
            outputs.push(h);
        }
        for r in &self.config.residuals {
            if r.to == ResidualTarget::Head {
                h = h.add(&outputs[r.from - 1])?;
            }
        }
        for (conv, act) in &self.head {
            h = conv.forward(h, p)?;
            if let Some(act) = act {
                h = act.forward(h, p)?;
            }
        }
        Ok(h)
    }

    pub fn forward<'t>(&self, z: Var<'t>, p: &Bound<'t>) -> Result<AffineVars<'t>> {
        let logits = self.logits(z, p)?;
        Ok(AffineVars {
            a1: logits.channel(0)?.sigmoid()?.scale(SLOPE_MAX)?,
            a0: logits.channel(1)?.sigmoid()?,
        })
    }

    /// Coefficients for `z` with frozen weights.
    pub fn predict(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = Bound::frozen(&tape, &self.store);
        let out = self.forward(tape.constant(z.clone()), &p)?;
        Ok(((*out.a1.value()).clone(), (*out.a0.value()).clone()))
    }
}

/// Outcome of [`blind_spot_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotReport {
    pub trials: usize,
    pub failures: usize,
    /// `(y, x, delta)` of the first leaking perturbation.
    pub first_failure: Option<(usize, usize, f64)>,
}

impl BlindSpotReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Perturb single pixels of random inputs by `+-1` or `+-100` and require
/// the coefficients at that pixel to stay bitwise identical.
pub fn blind_spot_check(net: &BlindSpotNet, trials: usize, size: usize, seed: u64) -> Result<BlindSpotReport> {
    const PER_INPUT: usize = 10;
    let mut rng = rng::stage_stream(seed, stage::CHECK);
    let mut report = BlindSpotReport {
        trials,
        failures: 0,
        first_failure: None,
    };
    let mut done = 0;
    while done < trials {
        let z = Tensor::from_fn(&[1, 1, size, size], |_| rng.random_range(0.0..1.0));
        let (a1, a0) = net.predict(&z)?;
        for _ in 0..PER_INPUT.min(trials - done) {
            let (y, x) = (rng.random_range(0..size), rng.random_range(0..size));
            let delta = [1.0, -1.0, 100.0, -100.0][rng.random_range(0..4)];
            let mut zp = z.clone();
            zp.set4(0, 0, y, x, z.at4(0, 0, y, x) + delta);
            let (b1, b0) = net.predict(&zp)?;
            let same = a1.at4(0, 0, y, x).to_bits() == b1.at4(0, 0, y, x).to_bits()
                && a0.at4(0, 0, y, x).to_bits() == b0.at4(0, 0, y, x).to_bits();
            if !same {
                report.failures += 1;
                report.first_failure.get_or_insert((y, x, delta));
            }
            done += 1;
        }
    }
    Ok(report)
}
