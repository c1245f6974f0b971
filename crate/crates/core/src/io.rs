//! File formats: `FAMLAT1` latent containers and 8-bit PGM renders.
//!
//! `FAMLAT1` layout: the 8-byte magic `FAMLAT1\0`, then `channels`, `height`
//! and `width` as little-endian `u32`, then `channels·height·width` little-endian
//! `f32` values, row-major per channel. Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

pub const FAMLAT_MAGIC: &[u8; 8] = b"FAMLAT1\0";
const HEADER_LEN: usize = 8 + 3 * 4;

pub fn encode_famlat(grid: &LatentGrid) -> Result<Vec<u8>> {
    let (c, h, w) = grid.dims();
    let dims: Vec<u32> = [c, h, w]
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Size(format!("dimension {d} exceeds u32"))))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.data().len());
    out.extend_from_slice(FAMLAT_MAGIC);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_famlat(bytes: &[u8]) -> Result<LatentGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != FAMLAT_MAGIC {
        return Err(Error::Format("bad magic, expected FAMLAT1".into()));
    }
    let dim = |i: usize| {
        let off = 8 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    LatentGrid::new(c, h, w, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_famlat(path: impl AsRef<Path>, grid: &LatentGrid) -> Result<()> {
    fs::write(path, encode_famlat(grid)?)?;
    Ok(())
}

pub fn read_famlat(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode_famlat(&bytes)
}

/// A binary (P5) 8-bit greyscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(Error::Format("only 8-bit P5 PGM is supported".into()));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")))
        };
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
        if pixels.len() != width * height {
            return Err(Error::Format("PGM payload size mismatch".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Maps `values` (row-major `height×width`) to bytes with min-max normalization.
/// A constant plane maps to mid-grey unless `fixed_range` is given.
pub fn render_plane(
    values: &[f64],
    height: usize,
    width: usize,
    fixed_range: Option<(f64, f64)>,
) -> Pgm {
    let (lo, hi) = fixed_range.unwrap_or_else(|| {
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    Pgm {
        width,
        height,
        pixels,
    }
}

/// Renders all channels side by side, each min-max normalized on its own.
pub fn render_channels(grid: &LatentGrid) -> Pgm {
    let (c, h, w) = grid.dims();
    let tiles: Vec<Pgm> = (0..c).map(|ch| render_plane(grid.channel(ch), h, w, None)).collect();
    let mut pixels = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for tile in &tiles {
            pixels.extend_from_slice(&tile.pixels[y * w..(y + 1) * w]);
        }
    }
    Pgm {
        width: c * w,
        height: h,
        pixels,
    }
}
