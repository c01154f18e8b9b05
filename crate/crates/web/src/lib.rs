//! Browser demo: renders noise fields, their low/high frequency split, the
//! masked high-band permutation and the evaluation boundary region as RGBA
//! buffers for a `<canvas>`.
//!
//! The `render_*` functions are plain Rust so they can be tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors.

use sourceswap::lattice::make_lpf;
use sourceswap::maskops::{self, BinaryMask};
use sourceswap::perturb::{self, PerturbMode};
use sourceswap::{rng, LatentGrid};
use wasm_bindgen::prelude::*;

/// Side of every rendered panel is `size`; panels are laid out left to right.
pub struct Panels {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl Panels {
    fn new(size: usize, count: usize) -> Self {
        Self { width: size * count, height: size, rgba: vec![255; size * size * count * 4] }
    }

    fn put(&mut self, panel: usize, size: usize, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + panel * size + x) * 4;
        self.rgba[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel 0 of `grid`, mapped symmetrically around zero by `scale`.
    fn put_field(&mut self, panel: usize, grid: &LatentGrid, scale: f64) {
        let size = grid.height();
        for y in 0..size {
            for x in 0..grid.width() {
                let v = (0.5 + 0.5 * grid.get(0, y, x) / scale).clamp(0.0, 1.0);
                let g = (v * 255.0).round() as u8;
                self.put(panel, size, y, x, [g, g, g]);
            }
        }
    }
}

fn check_size(size: usize) -> Result<(), String> {
    if !(8..=256).contains(&size) {
        return Err(format!("size {size} outside 8..=256"));
    }
    Ok(())
}

fn noise(size: usize, seed: u64) -> Result<LatentGrid, String> {
    let mut r = rng::seeded(seed);
    LatentGrid::from_fn(4, size, size, |_, _, _| rng::standard_normal(&mut r)).map_err(|e| e.to_string())
}

/// Disc of radius `radius_frac * size` centred in the frame.
fn disc(size: usize, radius_frac: f64) -> Result<BinaryMask, String> {
    let c = (size as f64 - 1.0) / 2.0;
    let r = radius_frac * size as f64;
    BinaryMask::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f64 - c, x as f64 - c);
        dy * dy + dx * dx <= r * r
    })
    .map_err(|e| e.to_string())
}

/// Three panels: the noise field, its low band and its high band.
pub fn render_frequency_split(size: usize, seed: u64, stop: f64) -> Result<Panels, String> {
    check_size(size)?;
    let z = noise(size, seed)?;
    let lpf = make_lpf(size, size, stop).map_err(|e| e.to_string())?;
    let (low, high) = perturb::split_frequency(&z, &lpf).map_err(|e| e.to_string())?;
    let mut p = Panels::new(size, 3);
    p.put_field(0, &z, 3.0);
    // the low band has much less energy; stretch it to stay visible
    p.put_field(1, &low, low.max_abs().max(1e-12));
    p.put_field(2, &high, 3.0);
    Ok(p)
}

/// Three panels: the noise field, its perturbation inside a centred disc,
/// and the absolute difference (red) with the mask outline.
pub fn render_perturbation(size: usize, seed: u64, mode: &str, stop: f64, radius_frac: f64) -> Result<Panels, String> {
    check_size(size)?;
    let mode: PerturbMode = mode.parse().map_err(|e: perturb::PerturbError| e.to_string())?;
    let z = noise(size, seed)?;
    let mask = disc(size, radius_frac)?;
    if mask.is_empty() {
        return Err("mask radius is too small".into());
    }
    let zp = perturb::perturb_initial_noise(&z, &mask, mode, seed ^ 0x9E37_79B9, stop).map_err(|e| e.to_string())?;
    let mut p = Panels::new(size, 3);
    p.put_field(0, &z, 3.0);
    p.put_field(1, &zp, 3.0);
    let diff = zp.sub(&z).map_err(|e| e.to_string())?;
    let scale = diff.max_abs().max(1e-12);
    let edge = mask.and_not(&maskops::erode(&mask, 1)).map_err(|e| e.to_string())?;
    for y in 0..size {
        for x in 0..size {
            let d = (diff.get(0, y, x).abs() / scale * 255.0).round() as u8;
            let rgb = if edge.get(y, x) { [40, 120, 255] } else { [d, 0, 0] };
            p.put(2, size, y, x, rgb);
        }
    }
    Ok(p)
}

/// One panel: an ellipse mask (gray), its dilation band (blue) and the
/// evaluation region between the rectangle and the dilated mask (orange).
pub fn render_boundary_region(size: usize, dilate: usize, margin: usize, aspect: f64) -> Result<Panels, String> {
    check_size(size)?;
    let c = (size as f64 - 1.0) / 2.0;
    let (ry, rx) = (0.3 * size as f64, 0.3 * size as f64 * aspect.clamp(0.2, 1.5));
    let fine = BinaryMask::from_fn(size, size, |y, x| {
        let (dy, dx) = ((y as f64 - c) / ry, (x as f64 - c) / rx);
        dy * dy + dx * dx <= 1.0
    })
    .map_err(|e| e.to_string())?;
    let dilated = maskops::dilate(&fine, dilate);
    let region = maskops::boundary_region(&fine, dilate, margin).map_err(|e| e.to_string())?;
    let mut p = Panels::new(size, 1);
    for y in 0..size {
        for x in 0..size {
            let rgb = if fine.get(y, x) {
                [110, 110, 110]
            } else if dilated.get(y, x) {
                [70, 130, 230]
            } else if region.get(y, x) {
                [245, 150, 40]
            } else {
                [250, 250, 250]
            };
            p.put(0, size, y, x, rgb);
        }
    }
    Ok(p)
}

fn js(r: Result<Panels, String>) -> Result<Vec<u8>, JsError> {
    r.map(|p| p.rgba).map_err(|e| JsError::new(&e))
}

/// RGBA for `render_frequency_split`; width is `3 * size`.
#[wasm_bindgen]
pub fn frequency_split(size: usize, seed: u32, stop: f64) -> Result<Vec<u8>, JsError> {
    js(render_frequency_split(size, seed as u64, stop))
}

/// RGBA for `render_perturbation`; width is `3 * size`.
#[wasm_bindgen]
pub fn perturb_preview(size: usize, seed: u32, mode: &str, stop: f64, radius_frac: f64) -> Result<Vec<u8>, JsError> {
    js(render_perturbation(size, seed as u64, mode, stop, radius_frac))
}

/// RGBA for `render_boundary_region`; width is `size`.
#[wasm_bindgen]
pub fn boundary_preview(size: usize, dilate: usize, margin: usize, aspect: f64) -> Result<Vec<u8>, JsError> {
    js(render_boundary_region(size, dilate, margin, aspect))
}
