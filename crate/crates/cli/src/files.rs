use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fbi_core::io;
use fbi_core::tensor::Tensor;

/// A single `.pgm` file, or every `.pgm` in a directory sorted by name.
pub fn list_pgm(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .pgm files in {}", path.display());
    }
    Ok(files)
}

pub fn read_all(paths: &[PathBuf]) -> Result<Vec<Tensor>> {
    paths
        .iter()
        .map(|p| io::read_pgm(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

/// Where output for `input` goes: into `out` if it is a directory target,
/// else `out` itself.
pub fn output_path(out: &Path, input: &Path, many: bool) -> Result<PathBuf> {
    if many || out.is_dir() {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let name = input.file_name().context("input has no file name")?;
        Ok(out.join(name))
    } else {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(out.to_path_buf())
    }
}

/// `lo:hi:n` as `n` evenly spaced values.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        bail!("grid {s:?} is not lo:hi:n");
    };
    let (lo, hi): (f64, f64) = (lo.parse()?, hi.parse()?);
    let n: usize = n.parse()?;
    if n == 0 || !(lo <= hi) {
        bail!("grid {s:?} is empty");
    }
    Ok(fbi_core::pge::linspace(lo, hi, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:3").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }
}
