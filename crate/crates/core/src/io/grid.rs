//! `GRF1` binary grids and 8-bit PGM import.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GRF1";
const HEADER_LEN: usize = 16;

/// Channel-major, then row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl GridImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(width * height * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid image".into()));
        }
        Ok(GridImage { width, height, channels, data })
    }

    pub fn from_array2(a: &Array2<f64>) -> Result<Self> {
        let (h, w) = a.dim();
        Self::new(w, h, 1, a.iter().copied().collect())
    }

    pub fn from_array3(a: &Array3<f64>) -> Result<Self> {
        let (c, h, w) = a.dim();
        Self::new(w, h, c, a.iter().copied().collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_array3(&self) -> Array3<f64> {
        Array3::from_shape_vec((self.channels, self.height, self.width), self.data.clone()).expect("validated length")
    }

    /// The single channel of a one-channel image.
    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.channels != 1 {
            return Err(Error::invalid(format!("expected a single-channel image, got {} channels", self.channels)));
        }
        Ok(self.to_array3().index_axis_move(Axis(0), 0))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing GRF1 magic"));
        }
        let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        let (width, height, channels) = (dim(0), dim(1), dim(2));
        let count = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 8 * count {
            return Err(Error::format(
                path,
                format!("header {width}x{height}x{channels} needs {count} values, payload holds {} bytes", payload.len()),
            ));
        }
        let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "non-finite value in payload"));
        }
        Ok(GridImage { width, height, channels, data })
    }
}

pub fn write_grid(path: impl AsRef<Path>, image: &GridImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a `GRF1` file, or an 8-bit binary PGM (`P5`) scaled to `[0, 1]`.
pub fn read_grid(path: impl AsRef<Path>) -> Result<GridImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        return read_pgm(&bytes, path);
    }
    GridImage::from_bytes(&bytes, path)
}

fn read_pgm(bytes: &[u8], path: &Path) -> Result<GridImage> {
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        let value: usize = token.parse().map_err(|_| Error::format(path, "malformed PGM header"))?;
        fields.push(value);
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::format(path, format!("only 8-bit PGM is supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < width * height {
        return Err(Error::format(path, "truncated PGM raster"));
    }
    let data = raster[..width * height].iter().map(|&b| b as f64 / 255.0).collect();
    GridImage::new(width, height, 1, data)
}
