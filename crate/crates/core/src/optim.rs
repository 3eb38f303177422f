//! Adam over a [`ParamStore`].

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::InvalidParameter(format!("invalid Adam settings {cfg:?}")));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Ok(Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Apply one update from the accumulated gradients and clear them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::InvalidParameter(
                "parameter store changed since optimizer creation".into(),
            ));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store).unwrap();
        store.get_mut(id).grad = Some(Tensor::new(&[2], vec![3.0, -0.5]).unwrap());
        opt.step(&mut store).unwrap();
        let w = store.get(id).value.data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[3], vec![2.0, -3.0, 0.5]).unwrap()).unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &store).unwrap();
        for _ in 0..2000 {
            let tape = Tape::new();
            let w = tape.param(&store, id);
            let loss = w.offset(-1.0).unwrap().square().unwrap().reduce_sum().unwrap();
            let g = tape.backward(loss).unwrap();
            store.accumulate(&g);
            opt.step(&mut store).unwrap();
        }
        for &w in store.get(id).value.data() {
            assert!((w - 1.0).abs() < 1e-3, "{w}");
        }
    }
}
