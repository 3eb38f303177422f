//! Layer lists, residual edges and their plain-text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Input displacement `(dy, dx)` of a kernel tap.
pub type Offset = (i32, i32);

/// One spatial convolution: the taps that carry weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub taps: Vec<Offset>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub prelu: bool,
    /// Follow the layer with a residual module of 1x1 convolutions.
    pub residual_module: bool,
}

impl LayerSpec {
    /// Common spacing of the taps and the kernel radius in units of it.
    pub fn dilation_and_radius(&self) -> (usize, usize) {
        let gcd = |mut a: u32, mut b: u32| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        let d = self
            .taps
            .iter()
            .flat_map(|&(y, x)| [y.unsigned_abs(), x.unsigned_abs()])
            .fold(0, gcd)
            .max(1);
        let r = self
            .taps
            .iter()
            .map(|&(y, x)| y.unsigned_abs().max(x.unsigned_abs()))
            .max()
            .unwrap_or(0)
            / d;
        (d as usize, r as usize)
    }

    /// Trainable scalars of the conv (bias included, absent taps excluded),
    /// its rectifier and its residual module at `width` channels.
    pub fn num_params(&self) -> usize {
        let conv = self.out_channels * self.in_channels * self.taps.len() + self.out_channels;
        let act = if self.prelu { self.out_channels } else { 0 };
        let c = self.out_channels;
        let rm = if self.residual_module { 2 * c + 2 * (c * c + c) } else { 0 };
        conv + act + rm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    Inner,
    Outer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualTarget {
    /// Added to the output of this layer (1-based).
    Layer(usize),
    /// Added to the features entering the head.
    Head,
}

/// Skip connection from the output of layer `from` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Residual {
    pub kind: ResidualKind,
    pub from: usize,
    pub to: ResidualTarget,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub residuals: Vec<Residual>,
    /// Output widths of the 1x1 head convolutions; the last must be 2.
    pub head: Vec<usize>,
}

fn ring(step: i32, with_centre: bool) -> Vec<Offset> {
    let mut taps = Vec::new();
    for dy in [-step, 0, step] {
        for dx in [-step, 0, step] {
            if with_centre || (dy, dx) != (0, 0) {
                taps.push((dy, dx));
            }
        }
    }
    taps
}

pub const BUILTIN_NAMES: [&str; 3] = ["fbi-safe-17", "naive-3", "unmasked-3"];

impl NetConfig {
    /// Seventeen spatial layers: a centre-masked 3x3, three layers with taps
    /// on the even 2-grid, thirteen on the even 4-grid. Width 32.
    pub fn fbi_safe_17() -> Self {
        Self::parity_safe("fbi-safe-17", 32, 3, 13)
    }

    /// Same layout with `mid` 2-grid and `deep` 4-grid layers at `width`.
    pub fn parity_safe(name: &str, width: usize, mid: usize, deep: usize) -> Self {
        let mut layers = vec![LayerSpec {
            taps: ring(1, false),
            in_channels: 1,
            out_channels: width,
            prelu: true,
            residual_module: false,
        }];
        for i in 0..mid + deep {
            layers.push(LayerSpec {
                taps: ring(if i < mid { 2 } else { 4 }, true),
                in_channels: width,
                out_channels: width,
                prelu: true,
                residual_module: true,
            });
        }
        let total = layers.len();
        let mut residuals = Vec::new();
        if total >= 9 {
            residuals.push(Residual {
                kind: ResidualKind::Inner,
                from: 1,
                to: ResidualTarget::Layer(9),
            });
        }
        residuals.push(Residual {
            kind: ResidualKind::Outer,
            from: 1,
            to: ResidualTarget::Head,
        });
        Self {
            name: name.into(),
            layers,
            residuals,
            head: vec![width, 2],
        }
    }

    /// Centre-masked 3x3, then the 2-grid ring without its centre, then a
    /// dilation-3 3x3 with all nine taps, composed in sequence.
    pub fn naive_3() -> Self {
        let taps = [ring(1, false), ring(2, false), ring(3, true)];
        Self::sequential("naive-3", 8, &taps)
    }

    /// Three ordinary 3x3 convolutions.
    pub fn unmasked_3() -> Self {
        let taps = [ring(1, true), ring(1, true), ring(1, true)];
        Self::sequential("unmasked-3", 8, &taps)
    }

    pub fn sequential(name: &str, width: usize, taps: &[Vec<Offset>]) -> Self {
        let layers = taps
            .iter()
            .enumerate()
            .map(|(i, t)| LayerSpec {
                taps: t.clone(),
                in_channels: if i == 0 { 1 } else { width },
                out_channels: width,
                prelu: true,
                residual_module: false,
            })
            .collect();
        Self {
            name: name.into(),
            layers,
            residuals: Vec::new(),
            head: vec![width, 2],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "fbi-safe-17" => Some(Self::fbi_safe_17()),
            "naive-3" => Some(Self::naive_3()),
            "unmasked-3" => Some(Self::unmasked_3()),
            _ => None,
        }
    }

    pub fn width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Structural checks; the blind-spot property is checked separately.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::NetConfig { line: 0, msg });
        if self.layers.is_empty() {
            return bad("no spatial layers".into());
        }
        let mut channels = 1;
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            if l.taps.is_empty() {
                return bad(format!("layer {n} has no taps"));
            }
            let mut sorted = l.taps.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != l.taps.len() {
                return bad(format!("layer {n} repeats a tap"));
            }
            let (d, r) = l.dilation_and_radius();
            if l.taps.iter().any(|&(y, x)| y % d as i32 != 0 || x % d as i32 != 0) || r > 32 {
                return bad(format!("layer {n} taps do not fit a dilated kernel"));
            }
            if l.in_channels != channels || l.out_channels == 0 {
                return bad(format!(
                    "layer {n} expects {} input channels, previous layer gives {channels}",
                    l.in_channels
                ));
            }
            channels = l.out_channels;
        }
        for r in &self.residuals {
            let to = match r.to {
                ResidualTarget::Layer(t) => t,
                ResidualTarget::Head => self.layers.len() + 1,
            };
            if r.from == 0 || r.from > self.layers.len() || to > self.layers.len() + 1 {
                return bad(format!("residual {r:?} refers to a missing layer"));
            }
            if r.from >= to {
                return bad(format!("residual {r:?} points backwards (cycle)"));
            }
            let dst = match r.to {
                ResidualTarget::Layer(t) => self.layers[t - 1].out_channels,
                ResidualTarget::Head => channels,
            };
            if self.layers[r.from - 1].out_channels != dst {
                return bad(format!("residual {r:?} joins different channel counts"));
            }
        }
        if self.head.last() != Some(&2) {
            return bad("head must end in 2 channels".into());
        }
        if self.head.contains(&0) {
            return bad("zero-width head layer".into());
        }
        Ok(())
    }

    /// Scalars over all layers, residual modules and the head.
    pub fn count_parameters(&self) -> usize {
        let mut total: usize = self.layers.iter().map(LayerSpec::num_params).sum();
        let mut c = self.width();
        for (i, &out) in self.head.iter().enumerate() {
            total += c * out + out;
            if i + 1 < self.head.len() {
                total += out;
            }
            c = out;
        }
        total
    }

    /// Text form accepted by [`NetConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = format!("name {}\n", self.name);
        for l in &self.layers {
            let taps: Vec<String> = l.taps.iter().map(|(y, x)| format!("{y},{x}")).collect();
            let _ = write!(
                s,
                "conv taps={} in={} out={}",
                taps.join(";"),
                l.in_channels,
                l.out_channels
            );
            if l.prelu {
                s.push_str(" prelu");
            }
            if l.residual_module {
                s.push_str(" rm");
            }
            s.push('\n');
        }
        for r in &self.residuals {
            let kind = match r.kind {
                ResidualKind::Inner => "inner",
                ResidualKind::Outer => "outer",
            };
            let to = match r.to {
                ResidualTarget::Layer(t) => t.to_string(),
                ResidualTarget::Head => "head".into(),
            };
            let _ = writeln!(s, "residual {kind} {} {to}", r.from);
        }
        let head: Vec<String> = self.head.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "head {}", head.join(" "));
        s
    }

    /// Parse the line format of [`NetConfig::to_text`]. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = NetConfig {
            name: "unnamed".into(),
            layers: Vec::new(),
            residuals: Vec::new(),
            head: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| Error::NetConfig { line, msg };
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let mut words = content.split_whitespace();
            let keyword = words.next().unwrap_or_default();
            let num = |w: Option<&str>| -> Result<usize> {
                w.ok_or_else(|| err("missing number".into()))?
                    .parse()
                    .map_err(|e| err(format!("bad number: {e}")))
            };
            match keyword {
                "name" => {
                    cfg.name = words.next().ok_or_else(|| err("missing name".into()))?.into();
                }
                "conv" => {
                    let mut taps = None;
                    let (mut cin, mut cout) = (None, None);
                    let (mut prelu, mut rm) = (false, false);
                    for w in words {
                        match w.split_once('=') {
                            Some(("taps", v)) => taps = Some(parse_taps(v).map_err(err)?),
                            Some(("in", v)) => cin = Some(num(Some(v))?),
                            Some(("out", v)) => cout = Some(num(Some(v))?),
                            None if w == "prelu" => prelu = true,
                            None if w == "rm" => rm = true,
                            _ => return Err(err(format!("unknown conv field {w}"))),
                        }
                    }
                    cfg.layers.push(LayerSpec {
                        taps: taps.ok_or_else(|| err("conv without taps".into()))?,
                        in_channels: cin.ok_or_else(|| err("conv without in=".into()))?,
                        out_channels: cout.ok_or_else(|| err("conv without out=".into()))?,
                        prelu,
                        residual_module: rm,
                    });
                }
                "residual" => {
                    let kind = match words.next() {
                        Some("inner") => ResidualKind::Inner,
                        Some("outer") => ResidualKind::Outer,
                        other => return Err(err(format!("unknown residual kind {other:?}"))),
                    };
                    let from = num(words.next())?;
                    let to = match words.next() {
                        Some("head") => ResidualTarget::Head,
                        w => ResidualTarget::Layer(num(w)?),
                    };
                    cfg.residuals.push(Residual { kind, from, to });
                }
                "head" => {
                    cfg.head = words.map(|w| num(Some(w))).collect::<Result<_>>()?;
                }
                other => return Err(err(format!("unknown keyword {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_taps(v: &str) -> std::result::Result<Vec<Offset>, String> {
    v.split(';')
        .map(|pair| {
            let (y, x) = pair.split_once(',').ok_or_else(|| format!("bad tap {pair}"))?;
            let p = |s: &str| s.trim().parse::<i32>().map_err(|e| format!("bad tap {pair}: {e}"));
            Ok((p(y)?, p(x)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for name in BUILTIN_NAMES {
            let cfg = NetConfig::builtin(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(NetConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = "name x\n# comment\nconv taps=0,1 in=1 out=2\nbogus\n";
        match NetConfig::parse(text) {
            Err(Error::NetConfig { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(NetConfig::parse("head 2\n").is_err());
        assert!(NetConfig::parse("conv taps= in=1 out=2\nhead 2\n").is_err());
    }

    #[test]
    fn kernel_geometry() {
        let l = |taps: Vec<Offset>| LayerSpec {
            taps,
            in_channels: 1,
            out_channels: 1,
            prelu: false,
            residual_module: false,
        };
        assert_eq!(l(ring(1, false)).dilation_and_radius(), (1, 1));
        assert_eq!(l(ring(4, true)).dilation_and_radius(), (4, 1));
        assert_eq!(l(vec![(0, 0)]).dilation_and_radius(), (1, 0));
        assert_eq!(l(vec![(0, 6), (3, 0)]).dilation_and_radius(), (3, 2));
    }

    #[test]
    fn parameter_counts() {
        let full = LayerSpec {
            taps: ring(1, true),
            in_channels: 1,
            out_channels: 1,
            prelu: false,
            residual_module: false,
        };
        assert_eq!(full.num_params(), 10);
        let masked = LayerSpec {
            taps: ring(1, false),
            ..full
        };
        assert_eq!(masked.num_params(), 9);
    }

    #[test]
    fn rejects_malformed() {
        let mut cfg = NetConfig::fbi_safe_17();
        cfg.residuals.push(Residual {
            kind: ResidualKind::Inner,
            from: 5,
            to: ResidualTarget::Layer(3),
        });
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::fbi_safe_17();
        cfg.layers.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::fbi_safe_17();
        cfg.layers[3].taps.clear();
        assert!(cfg.validate().is_err());
    }
}
