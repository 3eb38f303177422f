//! Binary PGM images, the `FBIT` tensor container and parameter checkpoints.
//!
//! Tensor container layout, all little-endian:
//! `"FBIT" | version u32 | ndim u32 | dims u64 * ndim | f32 payload`.
//!
//! Checkpoints are `"FBIC" | version u32 | meta_len u32 | meta utf-8 |
//! count u32 | count * (name_len u32 | name | byte_len u64 | tensor record)`.
//!
//! All writers go through a temporary file in the target directory and a
//! rename, so readers never see a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bsn::{BlindSpotNet, NetConfig};
use crate::error::{Error, Result};
use crate::noise::SynthesisMode;
use crate::pge::{PgeConfig, PgeNet};
use crate::tensor::Tensor;
use crate::var_est::EstimatorConfig;

const TENSOR_MAGIC: &[u8; 4] = b"FBIT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"FBIC";
const VERSION: u32 = 1;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Replace `path` with `bytes` via write-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| format_err(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Sample depth of a written PGM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            Self::Eight => 255,
            Self::Sixteen => 65535,
        }
    }
}

/// Encode a `(1, 1, H, W)` image in `[0, 1]` as binary PGM.
pub fn encode_pgm(img: &Tensor, depth: BitDepth) -> Result<Vec<u8>> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::InvalidShape {
            op: "write_pgm",
            reason: format!("expected one grey image, got {:?}", img.shape()),
        });
    }
    let max = depth.maxval();
    let mut out = format!("P5\n{w} {h}\n{max}\n").into_bytes();
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * max as f64).round() as u32;
        match depth {
            BitDepth::Eight => out.push(q as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    Ok(out)
}

/// Decode binary PGM to `(1, 1, H, W)` with samples divided by maxval.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| format_err(path, format!("bad {what} in header")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let max = num("maxval")?;
    if w == 0 || h == 0 || max == 0 || max > 65535 {
        return Err(format_err(path, format!("bad header values {w}x{h} max {max}")));
    }
    // exactly one whitespace byte separates the header from the samples
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    let wide = max > 255;
    let need = w * h * if wide { 2 } else { 1 };
    if data.len() < need {
        return Err(format_err(path, format!("truncated payload: {} of {need} bytes", data.len())));
    }
    let max = max as f64;
    let values: Vec<f64> = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / max)
            .collect()
    } else {
        data[..need].iter().map(|&b| b as f64 / max).collect()
    };
    Tensor::image(h, w, values)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?, path)
}

pub fn write_pgm(path: &Path, img: &Tensor, depth: BitDepth) -> Result<()> {
    write_atomic(path, &encode_pgm(img, depth)?)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.path, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        if self.take(4)? != want {
            return Err(format_err(self.path, "bad magic"));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(format_err(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.magic(TENSOR_MAGIC)?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(format_err(self.path, format!("rank {ndim} too large")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(self.u64()?).map_err(|_| format_err(self.path, "dimension overflow"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| format_err(self.path, "dimension overflow"))?;
            dims.push(d);
        }
        let payload = self.take(numel.checked_mul(4).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Tensor::new(&dims, data)
    }
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, path };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok(t)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?, path)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

/// Separates `key=value` metadata from a free-text body.
pub const META_BODY: &str = "---";

/// Named parameter tensors plus free-form `key=value` metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(meta: impl Into<String>, store: &crate::autograd::ParamStore) -> Self {
        Self {
            meta: meta.into(),
            tensors: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rec = encode_tensor(t);
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        r.magic(CHECKPOINT_MAGIC)?;
        let text = |r: &mut Reader<'_>, n: usize| -> Result<String> {
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| format_err(path, "invalid utf-8"))
        };
        let meta_len = r.u32()? as usize;
        let meta = text(&mut r, meta_len)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = text(&mut r, name_len)?;
            let len = usize::try_from(r.u64()?).map_err(|_| format_err(path, "record overflow"))?;
            let rec = r.take(len)?;
            tensors.push((name, decode_tensor(rec, path)?));
        }
        if r.pos != bytes.len() {
            return Err(format_err(path, "trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    /// Metadata text after the [`META_BODY`] line.
    pub fn meta_body(&self) -> Option<&str> {
        let start = self.meta.find(&format!("\n{META_BODY}\n"))?;
        Some(&self.meta[start + META_BODY.len() + 2..])
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.meta_value(key)
            .ok_or_else(|| Error::InvalidParameter(format!("checkpoint lacks {key}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.require("kind")?;
        if found != kind {
            return Err(Error::InvalidParameter(format!("expected a {kind} checkpoint, found {found}")));
        }
        Ok(())
    }

    pub fn from_pge(net: &PgeNet) -> Self {
        let c = net.config();
        let e = &c.estimator;
        let meta = format!(
            "kind=pge\nchannels={},{},{}\npatch_size={}\nstride={}\ntol={}",
            c.channels[0], c.channels[1], c.channels[2], e.patch_size, e.stride, e.tol_rel
        );
        Self::from_store(meta, net.params())
    }

    pub fn to_pge(&self) -> Result<PgeNet> {
        self.expect_kind("pge")?;
        let bad = |k: &str| Error::InvalidParameter(format!("bad checkpoint value for {k}"));
        let num = |k: &str| -> Result<usize> { self.require(k)?.parse().map_err(|_| bad(k)) };
        let channels: Vec<usize> = self
            .require("channels")?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad("channels")))
            .collect::<Result<_>>()?;
        let channels: [usize; 3] = channels.try_into().map_err(|_| bad("channels"))?;
        let estimator = EstimatorConfig {
            patch_size: num("patch_size")?,
            stride: num("stride")?,
            tol_rel: self.require("tol")?.parse().map_err(|_| bad("tol"))?,
        };
        let mut net = PgeNet::new(PgeConfig { channels, estimator }, 0)?;
        net.params_mut().load(&self.tensors)?;
        Ok(net)
    }

    /// The network description travels in the metadata body.
    pub fn from_denoiser(net: &BlindSpotNet, mode: SynthesisMode) -> Self {
        let meta = format!("kind=denoiser\nmode={mode}\n{META_BODY}\n{}", net.config().to_text());
        Self::from_store(meta, net.params())
    }

    pub fn to_denoiser(&self) -> Result<(BlindSpotNet, SynthesisMode)> {
        self.expect_kind("denoiser")?;
        let mode = self.require("mode")?.parse()?;
        let text = self
            .meta_body()
            .ok_or_else(|| Error::InvalidParameter("checkpoint lacks a network description".into()))?;
        let mut net = BlindSpotNet::build(&NetConfig::parse(text)?, 0)?;
        net.params_mut().load(&self.tensors)?;
        Ok((net, mode))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    /// Value of `key` in the metadata lines before any [`META_BODY`] line.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.lines().take_while(|l| *l != META_BODY).find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn pgm_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[1, 1, 5, 7], |i| (i * 37 % 256) as f64 / 255.0);
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &img, BitDepth::Eight).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
        let img16 = Tensor::from_fn(&[1, 1, 3, 4], |i| (i * 5003 % 65536) as f64 / 65535.0);
        write_pgm(&path, &img16, BitDepth::Sixteen).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img16);
    }

    #[test]
    fn pgm_header_and_errors() {
        let bytes = b"P5\n# comment\n2 1\n255\n\xff\x00";
        let t = decode_pgm(bytes, p()).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00\x01", p()).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0", p()).is_err());
        assert!(decode_pgm(b"P5\n1 1\n", p()).is_err());
        let wide = decode_pgm(b"P5 1 1 65535 \x80\x00", p()).unwrap();
        assert_eq!(wide.data(), &[32768.0 / 65535.0]);
    }

    #[test]
    fn tensor_layout_is_fixed() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        let mut want = b"FBIT".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, want);
        assert!(decode_tensor(&b[..b.len() - 1], p()).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad, p()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            meta: "kind=test\nwidth=3".into(),
            tensors: vec![
                ("a.w".into(), Tensor::new(&[2, 2], vec![0.5, 1.0, -3.0, 8.0]).unwrap()),
                ("b".into(), Tensor::scalar(0.25)),
            ],
        };
        let path = dir.path().join("m.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_value("width"), Some("3"));
        let bytes = fs::read(&path).unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3], p()).is_err());
        // no temp files left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn model_checkpoints_restore_networks() {
        let cfg = PgeConfig {
            channels: [2, 3, 4],
            estimator: EstimatorConfig { patch_size: 4, stride: 2, tol_rel: 1e-3 },
        };
        let pge = PgeNet::new(cfg, 5).unwrap();
        let ck = Checkpoint::decode(&Checkpoint::from_pge(&pge).encode(), p()).unwrap();
        let back = ck.to_pge().unwrap();
        assert_eq!(back.config(), &cfg);
        let y = Tensor::from_fn(&[1, 1, 16, 16], |i| 0.2 + 0.5 * ((i * 13 % 17) as f64 / 17.0));
        let (a, b) = (pge.estimate_one(&y).unwrap(), back.estimate_one(&y).unwrap());
        assert!((a.alpha - b.alpha).abs() < 1e-5 && (a.sigma - b.sigma).abs() < 1e-5);
        assert!(ck.to_denoiser().is_err());

        let bsn = BlindSpotNet::build(&NetConfig::parity_safe("small", 4, 1, 1), 3).unwrap();
        let ck = Checkpoint::decode(&Checkpoint::from_denoiser(&bsn, SynthesisMode::Literal).encode(), p()).unwrap();
        assert_eq!(ck.meta_value("kind"), Some("denoiser"));
        let (back, mode) = ck.to_denoiser().unwrap();
        assert_eq!(mode, SynthesisMode::Literal);
        assert_eq!(back.config(), bsn.config());
        let z = Tensor::from_fn(&[1, 1, 12, 12], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
        let (a1, _) = bsn.predict(&z).unwrap();
        let (b1, _) = back.predict(&z).unwrap();
        assert!(a1.max_abs_diff(&b1) < 1e-5);
    }

    proptest! {
        #[test]
        fn f32_tensors_round_trip_bit_exactly(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff) as f64)
                .collect();
            let t = Tensor::new(&dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t), p()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
