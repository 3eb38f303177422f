//! Layer building blocks shared by the estimator and denoiser networks.

use rand::Rng;

use crate::autograd::{ConvGeom, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Tape leaves for the parameters of one forward pass, indexed by id.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Bind every parameter of `store` as a tracked leaf.
    pub fn params(tape: &'t Tape, store: &ParamStore) -> Self {
        Self {
            vars: store.ids().map(|id| tape.param(store, id)).collect(),
        }
    }

    /// Bind every parameter as an untracked constant.
    pub fn frozen(tape: &'t Tape, store: &ParamStore) -> Self {
        Self {
            vars: store.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Use caller-supplied vars, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

/// Convolution with He-normal weights; masked taps start at zero.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(m) = &geom.mask {
            if m.len() != k * k || !m.iter().any(|&t| t) {
                return Err(Error::InvalidParameter(format!("{name}: bad tap mask")));
            }
        }
        let active = geom.mask.as_ref().map_or(k * k, |m| m.iter().filter(|&&t| t).count());
        let std = gain * (2.0 / (cin * active) as f64).sqrt();
        let mask = geom.mask.clone();
        let w = Tensor::from_fn(&[cout, cin, k, k], |i| {
            let live = mask.as_ref().is_none_or(|m| m[i % (k * k)]);
            if live {
                std * rng::normal(rng)
            } else {
                0.0
            }
        });
        let w = store.add(format!("{name}.w"), w)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            geom,
            cin,
            cout,
            k,
        })
    }

    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, 1, ConvGeom::same(1, 1), true, gain, rng)
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let b = self.b.map(|b| p.get(b));
        x.conv2d(&p.get(self.w), b.as_ref(), &self.geom)
    }

    /// Trainable scalars, masked taps excluded.
    pub fn num_params(&self) -> usize {
        let active = self
            .geom
            .mask
            .as_ref()
            .map_or(self.k * self.k, |m| m.iter().filter(|&&t| t).count());
        self.cout * self.cin * active + self.b.map_or(0, |_| self.cout)
    }
}

/// Per-channel parametric rectifier, slopes start at 0.25.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            slope: store.add(format!("{name}.slope"), Tensor::full(&[channels], 0.25))?,
        })
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        x.prelu(&p.get(self.slope))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_init_and_count() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1);
        let full = Conv::new(&mut store, "a", 1, 1, 3, ConvGeom::same(3, 1), true, 1.0, &mut r).unwrap();
        assert_eq!(full.num_params(), 10);
        let mut mask = vec![true; 9];
        mask[4] = false;
        let geom = ConvGeom::same(3, 1).with_mask(mask);
        let holed = Conv::new(&mut store, "b", 1, 1, 3, geom, true, 1.0, &mut r).unwrap();
        assert_eq!(holed.num_params(), 9);
        assert_eq!(store.get(holed.w).value.data()[4], 0.0);
        assert!(Conv::new(&mut store, "a", 1, 1, 3, ConvGeom::same(3, 1), true, 1.0, &mut r).is_err());
    }
}
