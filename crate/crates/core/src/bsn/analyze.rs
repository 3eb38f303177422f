//! Exact input-offset sets of a layer graph.
//!
//! Spatial layers take the Minkowski sum of the incoming set with their taps,
//! 1x1 layers and activations keep it, and residual edges take the union.
//! Each offset keeps one witness: the per-layer taps that sum to it, chosen
//! as the smallest sequence under the tap order of [`tap_rank`].

use std::cmp::Ordering;
use std::collections::HashMap;

use super::spec::{NetConfig, Offset, ResidualTarget};
use crate::error::{Error, Result};

/// Small, axis-aligned and positive taps come first.
fn tap_rank(&(y, x): &Offset) -> (i32, i32, i32) {
    (y.abs() + x.abs(), -y, -x)
}

fn cmp_paths(a: &[Offset], b: &[Offset]) -> Ordering {
    a.iter().map(tap_rank).cmp(b.iter().map(tap_rank))
}

#[derive(Clone, Debug, Default)]
pub struct DisplacementSet {
    paths: HashMap<Offset, Vec<Offset>>,
}

impl DisplacementSet {
    fn origin() -> Self {
        Self {
            paths: HashMap::from([((0, 0), Vec::new())]),
        }
    }

    fn insert(&mut self, o: Offset, path: Vec<Offset>) {
        match self.paths.get(&o) {
            Some(old) if cmp_paths(old, &path) != Ordering::Greater => {}
            _ => {
                self.paths.insert(o, path);
            }
        }
    }

    fn minkowski(&self, taps: &[Offset]) -> Self {
        let mut out = Self::default();
        for (&(y, x), path) in &self.paths {
            for &(ty, tx) in taps {
                let mut p = path.clone();
                p.push((ty, tx));
                out.insert((y + ty, x + tx), p);
            }
        }
        out
    }

    fn union_with(&mut self, other: &Self) {
        for (&o, p) in &other.paths {
            self.insert(o, p.clone());
        }
    }

    pub fn contains(&self, o: Offset) -> bool {
        self.paths.contains_key(&o)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Offsets in row-major order.
    pub fn offsets(&self) -> Vec<Offset> {
        let mut v: Vec<Offset> = self.paths.keys().copied().collect();
        v.sort();
        v
    }

    /// Taps, one per spatial layer on the chosen route, that reach `o`.
    pub fn path(&self, o: Offset) -> Option<&[Offset]> {
        self.paths.get(&o).map(Vec::as_slice)
    }

    /// Height and width of the bounding box.
    pub fn receptive_field(&self) -> (usize, usize) {
        let span = |f: fn(&Offset) -> i32| {
            let lo = self.paths.keys().map(f).min().unwrap_or(0);
            let hi = self.paths.keys().map(f).max().unwrap_or(0);
            (hi - lo + 1) as usize
        };
        (span(|o| o.0), span(|o| o.1))
    }

    /// Bounding-box area minus covered offsets.
    pub fn holes(&self) -> usize {
        let (h, w) = self.receptive_field();
        h * w - self.len()
    }
}

pub fn format_path(path: &[Offset]) -> String {
    if path.is_empty() {
        return "identity".into();
    }
    path.iter()
        .map(|(y, x)| format!("({y},{x})"))
        .collect::<Vec<_>>()
        .join("+")
}

/// Offsets of the input that can reach one pixel of the head output.
pub fn displacement_set(cfg: &NetConfig) -> Result<DisplacementSet> {
    cfg.validate()?;
    let mut outputs: Vec<DisplacementSet> = Vec::with_capacity(cfg.layers.len());
    let mut current = DisplacementSet::origin();
    for (i, layer) in cfg.layers.iter().enumerate() {
        current = current.minkowski(&layer.taps);
        for r in &cfg.residuals {
            if r.to == ResidualTarget::Layer(i + 1) {
                current.union_with(&outputs[r.from - 1]);
            }
        }
        outputs.push(current.clone());
    }
    for r in &cfg.residuals {
        if r.to == ResidualTarget::Head {
            current.union_with(&outputs[r.from - 1]);
        }
    }
    Ok(current)
}

/// Error with the witness path if the centre reaches the output.
pub fn check_blind_spot(set: &DisplacementSet) -> Result<()> {
    match set.path((0, 0)) {
        Some(p) => Err(Error::BlindSpotViolation {
            path: format_path(p),
        }),
        None => Ok(()),
    }
}
