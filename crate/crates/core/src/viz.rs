//! Per-token saliency maps of the normalized query/key matrices, written as
//! binary PGM images.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Query,
    Key,
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixKind::Query => "q",
            MatrixKind::Key => "k",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaliencySource {
    pub matrix: MatrixKind,
    pub layer: usize,
}

/// `g x g` map with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub grid: Tensor,
    pub source: Option<SaliencySource>,
}

impl SaliencyMap {
    pub fn side(&self) -> usize {
        self.grid.rows()
    }
}

/// Row ℓ2 norms of `m_hat` laid out row-major on a `grid_side²` grid, then
/// min-max scaled. A constant map becomes all zeros.
pub fn token_saliency(m_hat: &Tensor, grid_side: usize) -> Result<SaliencyMap> {
    let (n, d) = m_hat.dims2()?;
    if grid_side == 0 || n != grid_side * grid_side {
        return Err(Error::Shape(format!(
            "{n} tokens do not fill a {grid_side}x{grid_side} grid"
        )));
    }
    let data = m_hat.data();
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            data[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let scaled = norms
        .iter()
        .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect();
    Ok(SaliencyMap {
        grid: Tensor::from_vec(&[grid_side, grid_side], scaled)?,
        source: None,
    })
}

/// Grayscale image as stored in a PGM file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn render(map: &SaliencyMap, upscale: usize) -> Result<GrayImage> {
    if upscale == 0 {
        return Err(Error::Config("upscale must be at least 1".into()));
    }
    let (rows, cols) = map.grid.dims2()?;
    let (height, width) = (rows * upscale, cols * upscale);
    let pixels = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| {
            let v = map.grid.at(y / upscale, x / upscale).clamp(0.0, 1.0);
            (255.0 * v).round() as u8
        })
        .collect();
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Writes a binary PGM with each cell upscaled to an `upscale²` block.
pub fn write_pgm(map: &SaliencyMap, path: &Path, upscale: usize) -> Result<()> {
    let img = render(map, upscale)?;
    std::fs::write(path, encode_pgm(&img)).map_err(|e| Error::io(path, e))
}

/// Parses a binary (P5) PGM with maxval 255; `#` comments are allowed in
/// the header.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
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
            return Err(Error::format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::format(path, "not a binary PGM (expected P5)"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::format(path, format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(path, "image too large"))?;
    if bytes.len() < start || bytes.len() - start != len {
        return Err(Error::format(path, "raster size does not match header"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[start..].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}
