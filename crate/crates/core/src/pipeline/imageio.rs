//! PNG images as 3-channel grids in `[0, 1]`, and raw tensor files.

use std::fs;
use std::path::Path;

use crate::bridge::TensorWire;
use crate::lattice::LatentGrid;

use super::{PipelineError, Result};

pub fn load_rgb(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| PipelineError::Image(format!("{}: {e}", path.display())))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(LatentGrid::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f64 / 255.0)?)
}

/// Quantizes to 8 bits, clamping to `[0, 1]`. Grids with one channel are
/// written as gray.
pub fn save_rgb(grid: &LatentGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = grid.shape();
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(quantize(grid.get(ch.min(c - 1), y, x)));
            }
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| PipelineError::Image(format!("{}: {e}", path.display())))
}

/// Writes a grid as a bare TensorWire blob (float32).
pub fn save_tensor(grid: &LatentGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, TensorWire::from_grid(grid).encode()?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let bytes = fs::read(path)?;
    let (tensor, used) = TensorWire::decode(&bytes)?;
    if used != bytes.len() {
        return Err(PipelineError::Format(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(tensor.to_grid()?)
}
