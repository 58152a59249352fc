//! PGM/PPM images, token dumps and the output-directory lock.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{bail, Error, Result};
use crate::grid::Grid;
use crate::pyramid::TokenPyramid;
use crate::scalar::Scalar;

/// 8-bit binary netpbm: `P5` for one channel, `P6` for three. Values are
/// clamped to `[0, 1]` and mapped to `round(255·v)`.
pub fn encode_netpbm<S: Scalar>(image: &Grid<S>) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => bail!(Usage, "netpbm output needs 1 or 3 channels, got {c}"),
    };
    let side = image.side();
    let mut out = format!("{magic}\n{side} {side}\n255\n").into_bytes();
    out.extend(
        image
            .as_slice()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_netpbm<S: Scalar>(path: &Path, image: &Grid<S>) -> Result<()> {
    std::fs::write(path, encode_netpbm(image)?)?;
    Ok(())
}

/// Lays images out left to right, `cols` per row, on a zero background.
pub fn tile<S: Scalar>(images: &[Grid<S>], cols: usize) -> Result<(usize, usize, usize, Vec<S>)> {
    let Some(first) = images.first() else {
        bail!(Usage, "nothing to tile");
    };
    let (side, ch) = (first.side(), first.channels());
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * side, rows * side);
    let mut data = vec![S::zero(); w * h * ch];
    for (i, im) in images.iter().enumerate() {
        let (oy, ox) = ((i / cols) * side, (i % cols) * side);
        for r in 0..side {
            for c in 0..side {
                let dst = ((oy + r) * w + ox + c) * ch;
                data[dst..dst + ch].copy_from_slice(im.vector(r * side + c));
            }
        }
    }
    Ok((w, h, ch, data))
}

/// Rectangular variant used for tiled sheets.
pub fn encode_netpbm_raw<S: Scalar>(w: usize, h: usize, ch: usize, data: &[S]) -> Result<Vec<u8>> {
    let magic = match ch {
        1 => "P5",
        3 => "P6",
        c => bail!(Usage, "netpbm output needs 1 or 3 channels, got {c}"),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(
        data.iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Plain-text dump: one `scale i hxh` line per scale followed by its rows of indices.
pub fn token_dump(tokens: &TokenPyramid) -> String {
    let mut s = String::new();
    for (i, m) in tokens.maps().iter().enumerate() {
        let h = m.side();
        let _ = writeln!(s, "scale {} {h}x{h}", i + 1);
        for r in 0..h {
            let row: Vec<String> = (0..h).map(|c| m.get(r, c).to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    }
    s
}

/// Exclusive ownership of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".sarlab.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes() {
        let g = Grid::<f32>::from_vec(2, 1, vec![0.0, 1.0, 0.5, 2.0]).unwrap();
        let b = encode_netpbm(&g).unwrap();
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 255, 128, 255]);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
